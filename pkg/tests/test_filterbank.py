import math

import numpy as np
import pytest

from evflight.events import CountFrame, EventStream, bin_events
from evflight.filterbank import (DEFAULT_TIME_CONSTANTS_US, FilterBank, FilterBankConfig, FilterConfigError,
                                 SampleSet, SampleTensor, alphas_from_time_constants, binned_snapshot,
                                 encode_stream, pool_crop_quantize, read_samples, snapshot, write_samples)

from conftest import random_stream

SMALL = FilterBankConfig(crop=(4, 4), output_period_us=1000)


def test_alpha_examples():
    a = alphas_from_time_constants([200.0, 500000.0], 200)
    assert a[0] == pytest.approx(math.exp(-1))
    assert a[1] == pytest.approx(0.999600, abs=1e-6)
    with pytest.raises(FilterConfigError):
        alphas_from_time_constants([100.0], 200)


def test_config_validation():
    with pytest.raises(FilterConfigError):
        FilterBankConfig(time_constants_us=DEFAULT_TIME_CONSTANTS_US[::-1])
    with pytest.raises(FilterConfigError):
        FilterBankConfig(output_period_us=300)
    with pytest.raises(FilterConfigError):
        FilterBank(FilterBankConfig(), 320, 240)   # 160x120 after pooling < 240x240 crop


def _step_frames(fb, frames):
    for f in frames:
        fb.step(f)
    return fb


def test_impulse_half_alpha():
    cfg = FilterBankConfig(time_constants_us=tuple(200 / math.log(2) * (1 + i * 1e-9) for i in range(10)),
                           crop=(1, 1))
    fb = FilterBank(cfg, 2, 2)
    f = CountFrame.zeros(0, 200, 2, 2)
    f.pos[0, 0] = 1
    fb.step(f)
    vals = [fb.y[0, 0, 0]]
    for k in range(1, 4):
        fb.step(CountFrame.zeros(200 * k, 200 * (k + 1), 2, 2))
        vals.append(fb.y[0, 0, 0])
    assert np.allclose(vals, [0.5, 0.25, 0.125, 0.0625], atol=1e-8)


def test_constant_input_fixed_point_and_zero_input():
    cfg = FilterBankConfig(crop=(1, 1))
    fb = FilterBank(cfg, 2, 2)
    for k in range(3000):
        f = CountFrame.zeros(200 * k, 200 * (k + 1), 2, 2)
        f.pos[1, 1] = 1
        fb.step(f)
    y = fb.y
    assert y[:5, 1, 1] == pytest.approx(np.ones(5), abs=1e-9)
    assert np.all(y[:, 0, 0] == 0) and np.all(y[10:] == 0)


def test_step_rejects_misaligned_frames():
    fb = FilterBank(SMALL, 8, 8)
    with pytest.raises(ValueError):
        fb.step(CountFrame.zeros(200, 400, 8, 8))
    with pytest.raises(ValueError):
        fb.step(CountFrame.zeros(0, 200, 8, 6))


def test_sparse_advance_matches_dense_steps(rng):
    s = random_stream(rng, 3000, width=16, height=12, t_max=40_000)
    # add bursts so the count cap is exercised
    burst = EventStream(16, 12, np.full(10, 3), np.full(10, 2), np.ones(10), np.full(10, 5000))
    s = EventStream.from_unsorted(16, 12, np.r_[s.x, burst.x], np.r_[s.y, burst.y], np.r_[s.p, burst.p],
                                  np.r_[s.t, burst.t])
    cfg = FilterBankConfig(crop=(4, 4))
    dense = _step_frames(FilterBank(cfg, 16, 12), bin_events(s, 200, 0, 40_000))
    sparse = FilterBank(cfg, 16, 12)
    for t in (3000, 3000, 7000, 20_000, 40_000):
        sparse.advance(s, t)
    assert sparse.t_now == dense.t_now == 40_000
    assert np.abs(sparse.y - dense.y).max() < 1e-12


def test_snapshot_quantisation_examples():
    cfg = FilterBankConfig(crop=(2, 2))
    y = np.zeros((20, 4, 4))
    assert np.all(pool_crop_quantize(y, cfg) == 0)
    assert np.all(pool_crop_quantize(y + cfg.x_cap, cfg) == 255)
    y[0, 0, 0] = cfg.x_cap
    q = pool_crop_quantize(y, cfg)
    assert q[0, 0, 0] == 64 and q.dtype == np.uint8 and q.shape == (20, 2, 2)


def test_center_crop_position():
    cfg = FilterBankConfig(crop=(2, 2))
    y = np.zeros((20, 8, 12))       # pooled 4x6, crop rows 1-2, cols 2-3
    y[:, 2:4, 4:6] = cfg.x_cap
    q = pool_crop_quantize(y, cfg)
    assert q[0, 0, 0] == 255 and q[0, 1, 1] == 0


def test_monotone_in_input(rng):
    s = random_stream(rng, 500, width=8, height=8, t_max=20_000)
    extra = random_stream(rng, 200, width=8, height=8, t_max=20_000)
    both = EventStream.from_unsorted(8, 8, np.r_[s.x, extra.x], np.r_[s.y, extra.y], np.r_[s.p, extra.p],
                                     np.r_[s.t, extra.t])
    cfg = FilterBankConfig(crop=(1, 1))
    a = FilterBank(cfg, 8, 8).advance(s, 20_000).y
    b = FilterBank(cfg, 8, 8).advance(both, 20_000).y
    assert np.all(b >= a - 1e-15)


def test_slow_channels_dominate_after_burst():
    """From an equal level at burst end, slower channels hold more of it at every later step."""
    cfg = FilterBankConfig(crop=(1, 1))
    burst = EventStream(2, 2, np.zeros(5), np.zeros(5), np.ones(5), np.arange(5) * 200)
    fb = FilterBank(cfg, 2, 2).advance(burst, 1000)
    y0 = fb.y[:10, 0, 0]
    for t in range(1200, 20_000, 1000):
        kept = fb.advance(burst, t).y[:10, 0, 0] / y0
        assert np.all(np.diff(kept) >= 0)


def test_snapshot_and_sample_io(tmp_path, rng):
    s = random_stream(rng, 2000, width=16, height=16, t_max=9000)
    fb = FilterBank(SMALL, 16, 16).advance(s, 9000)
    snap = snapshot(fb)
    assert snap.data.shape == (20, 4, 4) and snap.t_us == 9000
    a = SampleTensor(snap.data, 9000, 0.123, 2, 11)
    b = SampleTensor(np.zeros((20, 4, 4), np.uint8), 12000, 0.0, 0, 0)
    write_samples([a, b], tmp_path / "x.smp")
    back = read_samples(tmp_path / "x.smp")
    assert len(back) == 2
    assert np.array_equal(back[0].data, a.data) and back[0].tau_s == pytest.approx(0.123)
    assert (back[0].r_bin, back[0].theta_bin, back[0].t_us) == (2, 11, 9000)
    raw = (tmp_path / "x.smp").read_bytes()
    assert len(raw) == 2 * (24 + 20 * 16)
    (tmp_path / "bad.smp").write_bytes(raw[:-5])
    with pytest.raises(ValueError):
        read_samples(tmp_path / "bad.smp")


def test_encode_stream_matches_incremental(rng):
    s = random_stream(rng, 3000, width=16, height=16, t_max=30_000)
    times = [3000, 9000, 30_000]
    x = encode_stream(s, times, SMALL)
    fb = FilterBank(SMALL, 16, 16)
    for i, t in enumerate(times):
        fb.advance(s, t)
        assert np.array_equal(x[i], fb.quantized())
    xb = encode_stream(s, times, SMALL, "binned")
    assert xb.shape == (3, 2, 4, 4)
    assert np.array_equal(xb[1], binned_snapshot(s, 9000, SMALL))
    with pytest.raises(ValueError):
        encode_stream(s, [3100], SMALL)


def test_sample_set_round_trip():
    samples = [SampleTensor(np.full((2, 3, 3), i, np.uint8), i, 0.1 * i, i % 4, i % 12) for i in range(5)]
    ss = SampleSet.from_samples(samples)
    assert len(ss) == 5 and ss.x.shape == (5, 2, 3, 3)
    back = ss.subset([1, 3]).to_samples()
    assert back[1].t_us == 3 and back[1].theta_bin == 3
