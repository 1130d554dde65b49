"""Event stream containers, time binning and the ``.evf`` binary format.

Events are held column-wise in numpy arrays; an :class:`Event` is only
materialised when a single record is requested.  Polarity is ``+1``/``-1`` in
memory and ``1``/``0`` on disk.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"EVF1"
VERSION = 1
HEADER = struct.Struct("<4sHHHQ6x")
HEADER_SIZE = HEADER.size  # 24
RECORD_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1"), ("t", "<u8")]
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 14
COUNT_MAX = np.iinfo(np.uint16).max


class EventFormatError(ValueError):
    """Malformed ``.evf`` content; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    p: int
    t: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events from a ``width`` x ``height`` sensor.

    ``t`` is in microseconds.  Construction validates bounds and ordering.
    """

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.uint16)
        y = np.ascontiguousarray(self.y, dtype=np.uint16)
        p = np.ascontiguousarray(self.p, dtype=np.int8)
        t = np.ascontiguousarray(self.t, dtype=np.uint64)
        if not (len(x) == len(y) == len(p) == len(t)):
            raise ValueError("event columns differ in length")
        if not (0 < self.width <= COUNT_MAX and 0 < self.height <= COUNT_MAX):
            raise ValueError(f"bad sensor size {self.width}x{self.height}")
        if len(x):
            if x.max() >= self.width or y.max() >= self.height:
                raise ValueError("event out of bounds")
            if not np.isin(p, (-1, 1)).all():
                raise ValueError("polarity must be +1 or -1")
            if (t[1:] < t[:-1]).any():
                raise ValueError("timestamps are not monotone")
        for name, arr in (("x", x), ("y", y), ("p", p), ("t", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_unsorted(cls, width, height, x, y, p, t) -> "EventStream":
        order = np.argsort(np.asarray(t, dtype=np.uint64), kind="stable")
        return cls(width, height, np.asarray(x)[order], np.asarray(y)[order],
                   np.asarray(p)[order], np.asarray(t)[order])

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event]) -> "EventStream":
        if not events:
            return cls(width, height)
        cols = np.array([(e.x, e.y, e.p) for e in events], dtype=np.int64).T
        return cls(width, height, cols[0], cols[1], cols[2], np.array([e.t for e in events], np.uint64))

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.p[i]), int(self.t[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width == other.width and self.height == other.height
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xypt"))

    def mask(self, keep: np.ndarray) -> "EventStream":
        return EventStream(self.width, self.height, self.x[keep], self.y[keep],
                           self.p[keep], self.t[keep])

    def window(self, t0: int, t1: int) -> "EventStream":
        """Events with ``t0 <= t < t1``."""
        lo, hi = np.searchsorted(self.t, [np.uint64(t0), np.uint64(t1)])
        return self.mask(slice(lo, hi))

    def concat(self, other: "EventStream") -> "EventStream":
        if (self.width, self.height) != (other.width, other.height):
            raise ValueError("sensor sizes differ")
        return EventStream(self.width, self.height,
                           np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
                           np.concatenate([self.p, other.p]), np.concatenate([self.t, other.t]))


@dataclass(frozen=True, eq=False)
class CountFrame:
    """Per-pixel event counts over ``[t_start, t_end)``; arrays are ``(height, width)``."""

    t_start: int
    t_end: int
    pos: np.ndarray
    neg: np.ndarray

    @classmethod
    def zeros(cls, t_start, t_end, width, height) -> "CountFrame":
        return cls(t_start, t_end, np.zeros((height, width), np.uint16),
                   np.zeros((height, width), np.uint16))

    @property
    def total(self) -> int:
        return int(self.pos.sum(dtype=np.int64) + self.neg.sum(dtype=np.int64))


def _saturating_counts(flat_index: np.ndarray, size: int) -> np.ndarray:
    counts = np.bincount(flat_index, minlength=size)
    return np.minimum(counts, COUNT_MAX).astype(np.uint16)


def bin_counts(stream: EventStream, dt_us: int, t0: int, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(n_bins, H, W)`` saturating count volumes for positive and negative events."""
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    w, h = stream.width, stream.height
    ev = stream.window(t0, t0 + n_bins * dt_us)
    k = ((ev.t - np.uint64(t0)) // np.uint64(dt_us)).astype(np.int64)
    flat = (k * h + ev.y.astype(np.int64)) * w + ev.x
    size = n_bins * h * w
    pos = _saturating_counts(flat[ev.p > 0], size).reshape(n_bins, h, w)
    neg = _saturating_counts(flat[ev.p < 0], size).reshape(n_bins, h, w)
    return pos, neg


def bin_events(stream: EventStream, dt_us: int, t0: int, t1: int) -> list[CountFrame]:
    """Split ``[t0, t1)`` into frames of ``dt_us``; a trailing partial window is dropped."""
    if dt_us <= 0:
        raise ValueError("dt_us must be positive")
    if t1 < t0:
        raise ValueError("t1 < t0")
    n = (t1 - t0) // dt_us
    if n == 0:
        return []
    pos, neg = bin_counts(stream, dt_us, t0, n)
    return [CountFrame(t0 + k * dt_us, t0 + (k + 1) * dt_us, pos[k], neg[k]) for k in range(n)]


def write_events(stream: EventStream, path: str | os.PathLike) -> None:
    rec = np.zeros(len(stream), RECORD_DTYPE)
    rec["x"], rec["y"], rec["t"] = stream.x, stream.y, stream.t
    rec["p"] = (stream.p > 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, stream.width, stream.height, len(stream)))
        fh.write(rec.tobytes())


def parse_events(buf: bytes) -> EventStream:
    if len(buf) < HEADER_SIZE:
        raise EventFormatError("truncated header", len(buf))
    magic, version, width, height, count = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise EventFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise EventFormatError(f"unsupported version {version}", 4)
    if width == 0 or height == 0:
        raise EventFormatError("zero sensor dimension", 6)
    need = HEADER_SIZE + count * RECORD_SIZE
    if len(buf) < need:
        whole = (len(buf) - HEADER_SIZE) // RECORD_SIZE
        raise EventFormatError(f"truncated record {whole} of {count}",
                               HEADER_SIZE + whole * RECORD_SIZE)
    if len(buf) > need:
        raise EventFormatError("trailing bytes after last record", need)
    rec = np.frombuffer(buf, RECORD_DTYPE, count=count, offset=HEADER_SIZE)

    def offset_of(i):
        return HEADER_SIZE + int(i) * RECORD_SIZE

    bad = np.flatnonzero((rec["x"] >= width) | (rec["y"] >= height))
    if len(bad):
        raise EventFormatError("event out of bounds", offset_of(bad[0]))
    bad = np.flatnonzero(rec["p"] > 1)
    if len(bad):
        raise EventFormatError("polarity byte not 0/1", offset_of(bad[0]) + 4)
    bad = np.flatnonzero(rec["t"][1:] < rec["t"][:-1])
    if len(bad):
        raise EventFormatError("non-monotone timestamp", offset_of(bad[0] + 1) + 6)
    p = np.where(rec["p"] == 1, 1, -1).astype(np.int8)
    return EventStream(width, height, rec["x"], rec["y"], p, rec["t"])


def read_events(path: str | os.PathLike) -> EventStream:
    with open(path, "rb") as fh:
        return parse_events(fh.read())
