import math
import warnings

import numpy as np
import pytest

from evflight.events import EventStream
from evflight.filterbank import FilterBankConfig
from evflight.inference import (Posterior, PosteriorUnderflowWarning, PredictionRecord, bayes_update,
                                bayes_update_direct, entropy, predict_stream, read_predictions,
                                windowed_estimate, write_predictions)
from evflight.nnet import ConvSpec, Model, ModelConfig


def _dirichlet(rng, n):
    return rng.dirichlet(np.ones(n))


def test_uniform_prior_gives_likelihood(rng):
    lt, lr = _dirichlet(rng, 12), _dirichlet(rng, 4)
    post = bayes_update(Posterior.uniform(), lt, lr)
    assert np.allclose(post.p_theta, lt, atol=1e-12) and np.allclose(post.p_r, lr, atol=1e-12)
    assert post.update_count == 1


def test_two_identical_updates_square(rng):
    lt, lr = _dirichlet(rng, 12), _dirichlet(rng, 4)
    post = bayes_update(bayes_update(Posterior.uniform(), lt, lr), lt, lr)
    assert np.allclose(post.p_theta, lt ** 2 / (lt ** 2).sum(), atol=1e-12)


def test_lambda_zero_is_instantaneous(rng):
    post = bayes_update(Posterior.uniform(), _dirichlet(rng, 12), _dirichlet(rng, 4))
    lt, lr = _dirichlet(rng, 12), _dirichlet(rng, 4)
    out = bayes_update(post, lt, lr, lam=0.0)
    assert np.array_equal(out.p_theta, lt / lt.sum()) or np.allclose(out.p_theta, lt, atol=1e-15)


def test_log_domain_matches_direct(rng):
    a = b = Posterior.uniform()
    for _ in range(10):
        lt, lr = _dirichlet(rng, 12), _dirichlet(rng, 4)
        a, b = bayes_update(a, lt, lr, 0.8), bayes_update_direct(b, lt, lr, 0.8)
        assert np.abs(a.p_theta - b.p_theta).max() < 1e-9 and np.abs(a.p_r - b.p_r).max() < 1e-9


def test_permutation_equivariance(rng):
    prior = bayes_update(Posterior.uniform(), _dirichlet(rng, 12), _dirichlet(rng, 4))
    lt, lr = _dirichlet(rng, 12), _dirichlet(rng, 4)
    pt, pr = rng.permutation(12), rng.permutation(4)
    a = bayes_update(prior, lt, lr)
    b = bayes_update(Posterior(prior.p_theta[pt], prior.p_r[pr]), lt[pt], lr[pr])
    assert np.allclose(a.p_theta[pt], b.p_theta) and np.allclose(a.p_r[pr], b.p_r)


def test_underflow_resets_to_likelihood():
    prior = Posterior(np.eye(12)[0], np.eye(4)[0])
    lt = np.eye(12)[5]
    with pytest.warns(PosteriorUnderflowWarning):
        out = bayes_update(prior, lt, np.full(4, 0.25))
    assert np.array_equal(out.p_theta, lt)


def test_invalid_likelihood_rejected():
    with pytest.raises(ValueError):
        bayes_update(Posterior.uniform(), -np.ones(12), np.full(4, 0.25))


def test_peaked_likelihood_argmax_within_five(rng):
    k = 7
    lt = np.full(12, 0.5 / 11)
    lt[k] = 0.5
    post = Posterior.uniform()
    for n in range(1, 6):
        post = bayes_update(post, lt, np.full(4, 0.25))
    assert int(np.argmax(post.p_theta)) == k


def _records(rng, n, lt=None):
    out, post = [], Posterior.uniform()
    for i in range(n):
        a = lt if lt is not None else _dirichlet(rng, 12)
        b = _dirichlet(rng, 4)
        post = bayes_update(post, a, b)
        out.append(PredictionRecord(0.001 * (i + 1), 0.05, a, b, post, tau_true=0.04 - 0.001 * i))
    return out


def test_windowed_estimate(rng):
    recs = _records(rng, 10)
    one = windowed_estimate(recs, 0.0045, 0.0055)
    assert one.n_records == 1
    assert np.allclose(one.posterior.p_theta, recs[4].p_theta)
    with pytest.raises(ValueError):
        windowed_estimate(recs, 1.0, 2.0)
    lt = _dirichlet(rng, 12)
    stationary = _records(rng, 10, lt)
    ents = [entropy(windowed_estimate(stationary, 0.0, 0.001 * k).posterior.p_theta) for k in range(1, 11)]
    assert all(b <= a + 1e-12 for a, b in zip(ents, ents[1:]))


def test_predictions_csv_round_trip(tmp_path, rng):
    recs = _records(rng, 4)
    write_predictions(recs, tmp_path / "p.csv")
    head = (tmp_path / "p.csv").read_text().splitlines()[0].split(",")
    assert head[:3] == ["t_s", "tau_hat_s", "tau_true_s"] and "p_theta_11" in head and "post_r_3" in head
    back = read_predictions(tmp_path / "p.csv")
    assert len(back) == 4
    assert np.array_equal(back[2].p_theta, recs[2].p_theta) and back[2].tau_true == recs[2].tau_true
    assert back[3].post_theta_bin == recs[3].post_theta_bin


def _tiny_model(in_ch=20):
    return Model(ModelConfig(in_channels=in_ch, input_hw=(10, 10), convs=tuple(ConvSpec(4) for _ in range(7)),
                             pool_after=(0, 2), pool_grid=1, head_hidden=4))


def test_predict_stream_record_counts(rng):
    cfg_ball = FilterBankConfig(crop=(10, 10), output_period_us=3000)
    n = 500
    s = EventStream(24, 24, rng.integers(0, 24, n), rng.integers(0, 24, n), np.ones(n),
                    np.sort(rng.integers(0, 300_000, n)))
    recs = predict_stream(s, cfg_ball, _tiny_model(), 3000, t_end_us=300_000)
    assert len(recs) == 100
    assert all(abs(r.posterior.p_theta.sum() - 1) < 1e-9 for r in recs)
    cfg_dart = FilterBankConfig(crop=(10, 10), output_period_us=1000)
    recs = predict_stream(s.window(0, 40_000), cfg_dart, _tiny_model(), 1000, t_end_us=40_000)
    assert len(recs) == 40
    assert predict_stream(EventStream(24, 24), cfg_dart, _tiny_model(), 1000) == []
    with pytest.raises(ValueError):
        predict_stream(s, cfg_dart, _tiny_model(2), 1000)
    with pytest.raises(ValueError):
        predict_stream(s, cfg_dart, _tiny_model(), 300)
    recs = predict_stream(s, cfg_dart, _tiny_model(), 1000, t_impact=0.0205, t_start_us=10_000)
    assert [round(r.t * 1e3) for r in recs] == list(range(10, 21))
    assert recs[-1].tau_true == pytest.approx(0.0005)


def test_posterior_normalised_after_many_updates(rng):
    post = Posterior.uniform()
    for _ in range(2000):
        post = bayes_update(post, _dirichlet(rng, 12), _dirichlet(rng, 4))
        assert abs(post.p_theta.sum() - 1) < 1e-9 and abs(post.p_r.sum() - 1) < 1e-9
