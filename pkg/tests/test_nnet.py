import math

import numpy as np
import pytest

from evflight.nnet import (ELU, AdamState, Conv2d, ConvSpec, GridAvgPool, Linear, LossWeights, MaxPool2x2,
                           Model, ModelConfig, NonFiniteError, ShapeError, TrainConfig, TrainingDiverged,
                           adam_step, evaluate_loss, load_model, log_softmax, loss, save_model, softmax, train,
                           write_history)
from evflight.filterbank import SampleSet
from evflight.nnet.layers import elu, elu_grad

from gradcheck import check_layer, numeric_grad, rel_error

TINY = dict(in_channels=2, input_hw=(10, 10), convs=tuple(ConvSpec(c) for c in (3, 3, 4, 4, 4, 4, 4)),
            pool_after=(0, 2), pool_grid=1, head_hidden=5)


def test_elu_values_and_smoothness():
    assert elu(np.array(0.0)) == 0 and elu(np.array(1.0)) == 1
    assert elu(np.array(-50.0)) == pytest.approx(-1.0)
    assert abs(elu_grad(np.array(1e-9)) - 1) < 1e-6 and abs(elu_grad(np.array(-1e-9)) - 1) < 1e-6


def test_identity_conv_and_maxpool():
    rng = np.random.default_rng(0)
    conv = Conv2d(3, 3, kernel=1, padding=0)
    conv.w[...] = np.eye(3)[:, :, None, None]
    x = rng.normal(size=(2, 5, 5, 3))
    assert np.array_equal(conv.forward(x), x)
    mp = MaxPool2x2()
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert mp.forward(x).item() == 4
    g = mp.backward(np.ones((1, 1, 1, 1)))
    assert g.reshape(2, 2).tolist() == [[0, 0], [0, 1]]


def test_shape_errors_name_both_shapes():
    conv = Conv2d(3, 4)
    with pytest.raises(ShapeError, match=r"\(1, 5, 5, 2\)"):
        conv.forward(np.zeros((1, 5, 5, 2)))
    with pytest.raises(ShapeError):
        Linear(4, 2).forward(np.zeros((3, 5)))


@pytest.mark.parametrize("case", range(6))
def test_conv_gradients(case):
    rng = np.random.default_rng(case)
    ci, co, k = rng.integers(1, 4), rng.integers(1, 4), [1, 3, 5][case % 3]
    stride = 1 if case < 4 else 2
    conv = Conv2d(ci, co, k, stride, k // 2, rng)
    x = rng.normal(size=(2, rng.integers(k, 8), rng.integers(k, 8), ci))
    assert check_layer(conv, x, rng) < 1e-4


@pytest.mark.parametrize("case", range(3))
def test_pool_elu_linear_gradients(case):
    rng = np.random.default_rng(10 + case)
    x = rng.normal(size=(2, 6, 4 + 2 * case, 3))
    assert check_layer(MaxPool2x2(), x, rng) < 1e-4
    assert check_layer(ELU(), x.copy(), rng) < 1e-4
    assert check_layer(GridAvgPool(2), x.copy(), rng) < 1e-4
    assert check_layer(Linear(7, 3, rng), rng.normal(size=(4, 7)), rng) < 1e-4


def test_model_and_loss_gradient():
    rng = np.random.default_rng(3)
    model = Model(ModelConfig(**TINY, tau_scale=0.3))
    x = rng.uniform(0, 1, (3, 2, 10, 10))
    tau, rb, tb = rng.uniform(0, 0.3, 3), rng.integers(0, 4, 3), rng.integers(0, 12, 3)
    w = LossWeights(0.7, 1.3, 0.9)

    def f():
        return loss(model.forward(x), tau, rb, tb, w, 0.3).total

    res = loss(model.forward(x), tau, rb, tb, w, 0.3)
    dx = model.backward(res.d_tau, res.d_theta, res.d_r, input_grad=True)
    grads = [g.copy() for g in model.grads]
    for p, g in zip(model.params, grads):
        probe = rng.choice(p.size, min(10, p.size), replace=False)
        assert rel_error(g.reshape(-1)[probe], numeric_grad(f, p, probe)) < 1e-4
    probe = rng.choice(x.size, 20, replace=False)
    assert rel_error(dx.reshape(-1)[probe], numeric_grad(f, x, probe)) < 1e-4


def test_softmax_and_loss_closed_forms():
    z = np.random.default_rng(0).normal(size=(5, 12)) * 30
    p = softmax(z)
    assert np.all(p >= 0) and np.abs(p.sum(axis=1) - 1).max() < 1e-12
    n = 4
    out = (np.full(n, 0.3), np.zeros((n, 12)), np.zeros((n, 4)))
    res = loss(out, np.full(n, 0.2), np.zeros(n, int), np.zeros(n, int))
    assert res.theta == pytest.approx(math.log(12)) and res.r == pytest.approx(math.log(4))
    assert res.ttc == pytest.approx(0.01)
    big = np.full((n, 12), -1e3)
    big[:, 5] = 1e3
    bigr = np.full((n, 4), -1e3)
    bigr[:, 2] = 1e3
    res = loss((np.full(n, 0.2), big, bigr), np.full(n, 0.2), np.full(n, 2), np.full(n, 5))
    assert res.total == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss(out, np.full(n, 0.2), np.full(n, 4), np.zeros(n, int))
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)


def test_loss_scaling_and_permutation():
    rng = np.random.default_rng(1)
    out = (rng.normal(size=6), rng.normal(size=(6, 12)), rng.normal(size=(6, 4)))
    lab = (rng.uniform(0, 1, 6), rng.integers(0, 4, 6), rng.integers(0, 12, 6))
    a = loss(out, *lab, LossWeights(1, 2, 3))
    b = loss(out, *lab, LossWeights(2.5, 5, 7.5))
    assert b.total == pytest.approx(2.5 * a.total)
    assert np.allclose(b.d_theta, 2.5 * a.d_theta) and np.allclose(b.d_tau, 2.5 * a.d_tau)
    perm = rng.permutation(6)
    c = loss(tuple(o[perm] for o in out), *(l[perm] for l in lab), LossWeights(1, 2, 3))
    assert c.total == pytest.approx(a.total)


def test_forward_properties():
    rng = np.random.default_rng(2)
    model = Model(ModelConfig(**TINY, zero_init_heads=True))
    tau, zt, zr = model.forward(np.zeros((2, 2, 10, 10)))
    assert np.all(tau == 0) and np.allclose(softmax(zt), 1 / 12) and np.allclose(softmax(zr), 1 / 4)
    model = Model(ModelConfig(**TINY))
    x = rng.uniform(size=(4, 2, 10, 10))
    x[1] = x[0]
    out = model.forward(x)
    assert np.allclose(out[1][0], out[1][1])
    perm = [2, 0, 3, 1]
    out_p = model.forward(x[perm])
    for a, b in zip(out, out_p):
        assert np.allclose(a[perm], b)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 3, 10, 10)))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="conv1"):
        model.forward(x)


def test_default_architecture_shapes():
    cfg = ModelConfig.desk()
    model = Model(cfg)
    assert model.feature_hw == (15, 15)
    tau, zt, zr = model.forward(np.zeros((1, 20, 60, 60)))
    assert tau.shape == (1,) and zt.shape == (1, 12) and zr.shape == (1, 4)
    with pytest.raises(ValueError):
        ModelConfig(convs=(ConvSpec(4),) * 6)


def test_adam_examples():
    p = [np.array([1.0])]
    st = AdamState(lr=1e-4)
    adam_step(p, [np.array([1.0])], st)
    assert p[0][0] - 1.0 == pytest.approx(-1e-4, rel=1e-3)
    q = [np.array([0.5, -2.0])]
    adam_step(q, [np.zeros(2)], AdamState())
    assert q[0].tolist() == [0.5, -2.0]
    w = [np.array([3.0])]
    st = AdamState(lr=0.1)
    f0 = w[0][0] ** 2
    for _ in range(2):
        adam_step(w, [2 * w[0]], st)
    assert w[0][0] ** 2 < f0


def _tiny_set(n, rng):
    return SampleSet(rng.integers(0, 256, (n, 2, 10, 10)).astype(np.uint8), rng.uniform(0, 0.3, n),
                     rng.integers(0, 4, n), rng.integers(0, 12, n))


def test_memorises_single_sample():
    rng = np.random.default_rng(4)
    one = _tiny_set(1, rng)
    data = one.subset(np.zeros(8, int))
    model = Model(ModelConfig(**TINY, tau_scale=0.3))
    hist = train(model, data, TrainConfig(epochs=200, batch_size=8, lr=1e-2, seed=0))
    assert len(hist) == 200
    assert evaluate_loss(model, data, LossWeights())["L"] < 0.01


def test_training_deterministic_and_history(tmp_path):
    rng = np.random.default_rng(5)
    data = _tiny_set(20, rng)
    runs = []
    for _ in range(2):
        model = Model(ModelConfig(**TINY))
        runs.append(train(model, data, TrainConfig(epochs=2, batch_size=8, seed=3), val=data))
        save_model(model, tmp_path / f"m{len(runs)}.evnn")
    assert runs[0] == runs[1]
    assert (tmp_path / "m1.evnn").read_bytes() == (tmp_path / "m2.evnn").read_bytes()
    assert [r["split"] for r in runs[0]] == ["train", "val", "train", "val"]
    write_history(runs[0], tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,split,L,L_ttc,L_theta,L_r"
    with pytest.raises(ValueError):
        train(Model(ModelConfig(**TINY)), data.subset([]), TrainConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_history():
    rng = np.random.default_rng(6)
    data = _tiny_set(16, rng)
    data.x = data.x.astype(float)
    data.x[8:] = 1e308                       # overflows inside the first convolution
    model = Model(ModelConfig(**TINY))
    with pytest.raises(TrainingDiverged) as ei:
        train(model, data, TrainConfig(epochs=5, batch_size=8, seed=0))
    assert isinstance(ei.value.history, list)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    model = Model(ModelConfig(**TINY, dtype="float32"))
    save_model(model, tmp_path / "m.evnn")
    back = load_model(tmp_path / "m.evnn")
    assert back.config == model.config
    x = rng.uniform(size=(2, 2, 10, 10))
    for a, b in zip(model.forward(x), back.forward(x)):
        assert np.array_equal(a, b)
    raw = (tmp_path / "m.evnn").read_bytes()
    assert raw[:4] == b"EVNN"
    (tmp_path / "bad.evnn").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.evnn")


def test_input_gain_equals_scaled_input():
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 1, (2, 2, 10, 10))
    a = Model(ModelConfig(**TINY, input_gain=16.0))
    b = Model(ModelConfig(**TINY))
    for out_a, out_b in zip(a.forward(x), b.forward(16.0 * x)):
        assert np.allclose(out_a, out_b, rtol=1e-12, atol=1e-12)
    g = [rng.normal(size=3), rng.normal(size=(2, 12)), rng.normal(size=(2, 4))]
    g[0] = g[0][:2]
    dx_a = a.backward(*g, input_grad=True)
    dx_b = b.backward(*g, input_grad=True)
    assert np.allclose(dx_a, 16.0 * dx_b)
