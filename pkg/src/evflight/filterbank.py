"""Multi-scale exponential filterbank over per-polarity event counts.

Every pixel and polarity carries ten first-order low-pass filters
``y[n] = a*y[n-1] + (1-a)*x[n]`` updated on a fixed 200 us grid, where
``x[n]`` is the (capped) number of events in step ``n``.  Snapshots are
2x2 average-pooled, centre-cropped and quantised to uint8.

Two update paths exist: :meth:`FilterBank.step` applies the recursion densely
to one :class:`~evflight.events.CountFrame`; :meth:`FilterBank.advance`
consumes an event stream sparsely, decaying each pixel lazily in closed form.
They agree to rounding error.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .events import CountFrame, EventStream

DEFAULT_TIME_CONSTANTS_US = (200.0, 477.0, 1130.0, 2710.0, 6470.0, 15440.0,
                           36840.0, 87871.0, 200000.0, 500000.0)
N_SCALES = len(DEFAULT_TIME_CONSTANTS_US)
N_CHANNELS = 2 * N_SCALES


POWER_TABLE_MAX = 1 << 16   # cached alpha powers (13 s of 200 us steps)


class FilterConfigError(ValueError):
    pass


def alphas_from_time_constants(time_constants_us, dt_us: float) -> np.ndarray:
    T = np.asarray(time_constants_us, float)
    if np.any(T < dt_us):
        raise FilterConfigError(f"time constants must be >= step {dt_us} us")
    return np.exp(-dt_us / T)


@dataclass(frozen=True)
class FilterBankConfig:
    time_constants_us: tuple = DEFAULT_TIME_CONSTANTS_US
    dt_us: int = 200
    output_period_us: int = 3000
    crop: tuple = (240, 240)
    x_cap: float = 4.0
    downscale: int = 2

    def __post_init__(self):
        T = self.time_constants_us
        if len(T) != N_SCALES or any(b <= a for a, b in zip(T, T[1:])):
            raise FilterConfigError("need 10 strictly increasing time constants")
        if self.dt_us <= 0 or self.output_period_us % self.dt_us:
            raise FilterConfigError("output period must be a multiple of the step")
        if self.x_cap <= 0:
            raise FilterConfigError("x_cap must be positive")
        a = self.alphas
        if not np.all((a > 0) & (a < 1)):
            raise FilterConfigError("alpha outside (0, 1)")

    @property
    def alphas(self) -> np.ndarray:
        return alphas_from_time_constants(self.time_constants_us, self.dt_us)

    def check_sensor(self, width: int, height: int) -> None:
        ch, cw = self.crop
        if width // self.downscale < cw or height // self.downscale < ch:
            raise FilterConfigError(
                f"sensor {width}x{height} too small for {cw}x{ch} crop after {self.downscale}x downscale")


@dataclass
class SampleTensor:
    """Quantised network input ``(C, H, W)`` uint8 with its labels."""

    data: np.ndarray
    t_us: int = 0
    tau_s: float = float("nan")
    r_bin: int = 0
    theta_bin: int = 0


def pool_crop_quantize(y: np.ndarray, config: FilterBankConfig) -> np.ndarray:
    """Average-pool by ``downscale``, centre-crop, map ``[0, x_cap]`` onto ``0..255``."""
    c, h, w = y.shape
    f = config.downscale
    h2, w2 = h // f, w // f
    pooled = y[:, :h2 * f, :w2 * f].reshape(c, h2, f, w2, f).mean(axis=(2, 4))
    ch, cw = config.crop
    oy, ox = (h2 - ch) // 2, (w2 - cw) // 2
    crop = pooled[:, oy:oy + ch, ox:ox + cw]
    q = np.floor(255.0 * np.clip(crop / config.x_cap, 0.0, 1.0) + 0.5)
    return q.astype(np.uint8)


class FilterBank:
    """Filter state ``(20, H, W)``: channels 0-9 positive polarity, 10-19 negative."""

    def __init__(self, config: FilterBankConfig, width: int, height: int, t0_us: int = 0):
        config.check_sensor(width, height)
        self.config = config
        self.width, self.height = width, height
        self.t_now = int(t0_us)
        self._alpha = config.alphas
        self._log_alpha = np.log(self._alpha)
        # y stored as of step `last` per cell (polarity-major, then pixel), one row of
        # N_SCALES values per cell so sparse updates touch contiguous memory; decayed lazily.
        self._y = np.zeros((2 * height * width, N_SCALES))
        self._last = np.zeros(2 * height * width, np.int64)
        self._n = 0  # steps consumed
        self._pow_table = np.ones((1, N_SCALES))

    @property
    def y(self) -> np.ndarray:
        """Materialised filter values at ``t_now`` as ``(20, H, W)``."""
        self._materialize()
        y = self._y.reshape(2, self.height * self.width, N_SCALES).transpose(0, 2, 1)
        return np.ascontiguousarray(y).reshape(N_CHANNELS, self.height, self.width)

    def _materialize(self) -> None:
        lag = self._n - self._last
        if lag.any():
            self._y *= np.exp(lag[:, None] * self._log_alpha[None, :])
            self._last[:] = self._n

    def step(self, frame: CountFrame) -> "FilterBank":
        """One dense update with the counts in ``frame`` (must cover ``[t_now, t_now+dt)``)."""
        dt = self.config.dt_us
        if frame.pos.shape != (self.height, self.width) or frame.neg.shape != frame.pos.shape:
            raise ValueError(f"frame shape {frame.pos.shape} != sensor {(self.height, self.width)}")
        if frame.t_start != self.t_now or frame.t_end - frame.t_start != dt:
            raise ValueError(f"frame [{frame.t_start}, {frame.t_end}) does not match step at {self.t_now}")
        self._materialize()
        x = np.stack([frame.pos, frame.neg]).reshape(-1, 1).astype(float)
        np.minimum(x, self.config.x_cap, out=x)
        a = self._alpha[None, :]
        self._y = a * self._y + (1.0 - a) * x
        self._n += 1
        self._last[:] = self._n
        self.t_now += dt
        return self

    def advance(self, stream: EventStream, t_until_us: int) -> "FilterBank":
        """Consume events in ``[t_now, t_until)``; ``t_until`` is rounded down to the step grid."""
        dt = self.config.dt_us
        n_steps = (int(t_until_us) - self.t_now) // dt
        if n_steps <= 0:
            return self
        ev = stream.window(self.t_now, self.t_now + n_steps * dt)
        if len(ev):
            if (ev.width, ev.height) != (self.width, self.height):
                raise ValueError("stream sensor size does not match filterbank")
            self._consume(ev, n_steps)
        self._n += n_steps
        self.t_now += n_steps * dt
        return self

    def _consume(self, ev: EventStream, n_steps: int) -> None:
        dt = self.config.dt_us
        npix = self.width * self.height
        end = self._n + n_steps  # state index after this chunk
        k = self._n + ((ev.t - np.uint64(self.t_now)) // np.uint64(dt)).astype(np.int64) + 1
        pix = ev.y.astype(np.int64) * self.width + ev.x
        pol = (ev.p < 0).astype(np.int64)
        key = (pol * npix + pix) * (end + 1) + k
        key, counts = np.unique(key, return_counts=True)
        x = np.minimum(counts, self.config.x_cap).astype(float)
        k = key % (end + 1)
        cell = key // (end + 1)
        # Closed form at `end`: y = a^(end-last) y_last + sum (1-a) a^(end-k) x_k
        starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])   # keys are sorted, so cells are grouped
        cells = cell[starts]
        decayed = np.take(self._y, cells, axis=0) * self._powers(end - np.take(self._last, cells))
        w = np.take(self._powers(np.arange(n_steps)), end - k, axis=0)
        w *= (1.0 - self._alpha)[None, :] * x[:, None]
        sizes = np.diff(np.r_[starts, len(cell)])
        add = np.take(w, starts, axis=0)
        multi = sizes > 1
        if multi.any():
            rows = np.repeat(multi, sizes)
            sub_starts = np.r_[0, np.cumsum(sizes[multi])[:-1]]
            add[multi] = np.add.reduceat(w[rows], sub_starts, axis=0)
        self._y[cells] = decayed + add
        self._last[cells] = end

    def _powers(self, lag: np.ndarray) -> np.ndarray:
        """``alpha ** lag`` per scale, shape ``(len(lag), N_SCALES)``; small lags come from a table."""
        lag = np.asarray(lag, np.int64)
        need = int(lag.max(initial=0)) + 1
        if need > len(self._pow_table) and len(self._pow_table) < POWER_TABLE_MAX:
            size = min(max(need, 2 * len(self._pow_table)), POWER_TABLE_MAX)
            self._pow_table = np.exp(np.arange(size)[:, None] * self._log_alpha[None, :])
        table = self._pow_table
        if need <= len(table):
            return np.take(table, lag, axis=0)
        out = np.take(table, np.minimum(lag, len(table) - 1), axis=0)
        far = lag >= len(table)
        out[far] = np.exp(lag[far, None] * self._log_alpha[None, :])
        return out

    def quantized(self) -> np.ndarray:
        return pool_crop_quantize(self.y, self.config)


def snapshot(state: FilterBank, config: FilterBankConfig | None = None) -> SampleTensor:
    """Current state as an unlabelled :class:`SampleTensor` stamped with ``t_now``."""
    return SampleTensor(pool_crop_quantize(state.y, config or state.config), state.t_now)


def binned_snapshot(stream: EventStream, t_us: int, config: FilterBankConfig,
                    window_us: int = 477) -> np.ndarray:
    """Two-channel input from events in ``[t - window, t)`` only (the no-filter ablation)."""
    ev = stream.window(max(t_us - window_us, 0), t_us)
    counts = np.zeros((2, stream.height * stream.width))
    pix = ev.y.astype(np.int64) * stream.width + ev.x
    counts[0] = np.bincount(pix[ev.p > 0], minlength=counts.shape[1])
    counts[1] = np.bincount(pix[ev.p < 0], minlength=counts.shape[1])
    np.minimum(counts, config.x_cap, out=counts)
    return pool_crop_quantize(counts.reshape(2, stream.height, stream.width), config)


# --- .smp files --------------------------------------------------------------

SMP_HEADER = struct.Struct("<HHHQdBB")  # channels, H, W, t_us, tau_ms, r_bin, theta_bin


def encode_sample(s: SampleTensor) -> bytes:
    data = np.ascontiguousarray(s.data, dtype=np.uint8)
    c, h, w = data.shape
    return SMP_HEADER.pack(c, h, w, int(s.t_us), float(s.tau_s) * 1000.0,
                           int(s.r_bin), int(s.theta_bin)) + data.tobytes()


def write_samples(samples, path: str | os.PathLike) -> None:
    """Write one or more samples back to back."""
    if isinstance(samples, SampleTensor):
        samples = [samples]
    with open(path, "wb") as fh:
        for s in samples:
            fh.write(encode_sample(s))


def read_samples(path: str | os.PathLike) -> list[SampleTensor]:
    with open(path, "rb") as fh:
        buf = fh.read()
    out, off = [], 0
    while off < len(buf):
        if len(buf) - off < SMP_HEADER.size:
            raise ValueError(f"truncated sample header at byte {off}")
        c, h, w, t_us, tau_ms, rb, tb = SMP_HEADER.unpack_from(buf, off)
        off += SMP_HEADER.size
        n = c * h * w
        if len(buf) - off < n:
            raise ValueError(f"truncated sample payload at byte {off}")
        data = np.frombuffer(buf, np.uint8, n, off).reshape(c, h, w).copy()
        off += n
        out.append(SampleTensor(data, t_us, tau_ms / 1000.0, rb, tb))
    return out


@dataclass
class SampleSet:
    """Stacked samples: ``x`` uint8 ``(N, C, H, W)`` and per-sample labels."""

    x: np.ndarray
    tau: np.ndarray
    r_bin: np.ndarray
    theta_bin: np.ndarray
    t_us: np.ndarray = field(default=None)
    source: np.ndarray = field(default=None)  # recording index per sample

    def __post_init__(self):
        n = len(self.x)
        if self.t_us is None:
            self.t_us = np.zeros(n, np.int64)
        if self.source is None:
            self.source = np.zeros(n, np.int64)

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.x[idx], self.tau[idx], self.r_bin[idx], self.theta_bin[idx],
                         self.t_us[idx], self.source[idx])

    @classmethod
    def from_samples(cls, samples: list[SampleTensor], source=None) -> "SampleSet":
        if not samples:
            raise ValueError("no samples")
        return cls(np.stack([s.data for s in samples]),
                   np.array([s.tau_s for s in samples]),
                   np.array([s.r_bin for s in samples], np.int64),
                   np.array([s.theta_bin for s in samples], np.int64),
                   np.array([s.t_us for s in samples], np.int64),
                   None if source is None else np.asarray(source, np.int64))

    def to_samples(self) -> list[SampleTensor]:
        return [SampleTensor(self.x[i], int(self.t_us[i]), float(self.tau[i]),
                             int(self.r_bin[i]), int(self.theta_bin[i])) for i in range(len(self))]

    @classmethod
    def concat(cls, sets: list["SampleSet"]) -> "SampleSet":
        return cls(*(np.concatenate([getattr(s, f) for s in sets])
                     for f in ("x", "tau", "r_bin", "theta_bin", "t_us", "source")))


def snapshot_times(t_end_us: int, period_us: int) -> np.ndarray:
    """Output instants ``period, 2*period, ...`` not after ``t_end``."""
    n = int(t_end_us) // int(period_us)
    return (np.arange(1, n + 1) * int(period_us)).astype(np.int64)


def encode_stream(stream: EventStream, times_us, config: FilterBankConfig,
                  encoder: str = "exp", bin_window_us: int = 477) -> np.ndarray:
    """Network inputs ``(len(times), C, H, W)`` at the requested increasing instants."""
    times_us = np.asarray(times_us, np.int64)
    if encoder == "binned":
        return np.stack([binned_snapshot(stream, t, config, bin_window_us) for t in times_us]) \
            if len(times_us) else np.zeros((0, 2, *config.crop), np.uint8)
    if encoder != "exp":
        raise ValueError(f"unknown encoder {encoder!r}")
    fb = FilterBank(config, stream.width, stream.height)
    out = np.zeros((len(times_us), N_CHANNELS, *config.crop), np.uint8)
    for i, t in enumerate(times_us):
        if t % config.dt_us:
            raise ValueError("snapshot instants must lie on the step grid")
        fb.advance(stream, int(t))
        out[i] = fb.quantized()
    return out


def input_channels(encoder: str) -> int:
    return N_CHANNELS if encoder == "exp" else 2
