"""Error metrics for time to collision and the polar impact bins, with per-interval breakdowns."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import N_R_BINS, N_THETA_BINS, R_BIN_EDGES_MM, THETA_BIN_DEG

log = logging.getLogger(__name__)

BALL_EDGES_S = (0.3, 0.2, 0.1, 0.0)
DART_EDGES_S = (0.04, 0.03, 0.02, 0.01, 0.0)


def _bins(a, n: int, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.size and (not np.issubdtype(a.dtype, np.integer) or a.min() < 0 or a.max() >= n):
        raise ValueError(f"{what} bin out of range 0..{n - 1}")
    return a.astype(np.int64)


def ttc_error(tau, tau_hat) -> np.ndarray:
    """Relative error ``|tau - tau_hat| / tau``; undefined (nan) where ``tau <= 0``."""
    tau = np.asarray(tau, float)
    tau_hat = np.asarray(tau_hat, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(tau > 0, np.abs(tau - tau_hat) / np.where(tau > 0, tau, 1.0), np.nan)


def median_ttc_error(tau, tau_hat) -> float:
    e = ttc_error(tau, tau_hat)
    bad = int(np.isnan(e).sum())
    if bad:
        log.info("median_ttc_error: excluded %d samples with tau <= 0", bad)
    e = e[~np.isnan(e)]
    return float(np.median(e)) if e.size else float("nan")


def theta_distance(a, b) -> np.ndarray:
    d = np.abs(_bins(a, N_THETA_BINS, "theta") - _bins(b, N_THETA_BINS, "theta"))
    return np.minimum(d, N_THETA_BINS - d)


def theta_error(a, b) -> np.ndarray:
    """Circular bin distance in degrees (30 per bin, at most 180)."""
    return THETA_BIN_DEG * theta_distance(a, b)


def theta_error_sq(a, b) -> np.ndarray:
    """Literal squared form: 30 * (a - b)**2 on raw bin indices, no wrap-around."""
    d = _bins(a, N_THETA_BINS, "theta") - _bins(b, N_THETA_BINS, "theta")
    return THETA_BIN_DEG * d.astype(float) ** 2


_F_MM = np.array(R_BIN_EDGES_MM)


def radius_error(a, b) -> np.ndarray:
    """Absolute difference of the radius-bin lower edges, in mm."""
    return np.abs(_F_MM[_bins(a, N_R_BINS, "radius")] - _F_MM[_bins(b, N_R_BINS, "radius")])


def radius_error_sq(a, b) -> np.ndarray:
    return radius_error(a, b) ** 2


@dataclass
class IntervalRow:
    tau_hi: float
    tau_lo: float
    n: int
    median_ttc_pct_error: float
    mean_theta_error_deg: float
    mean_radius_error_mm: float
    mean_theta_error_sq: float
    mean_radius_error_sq: float


@dataclass
class MetricReport:
    median_ttc_pct_error: float
    mean_theta_error_deg: float
    mean_radius_error_mm: float
    mean_theta_error_sq: float
    mean_radius_error_sq: float
    n: int
    intervals: list[IntervalRow] = field(default_factory=list)
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (tau, tau_hat)

    def interval(self, k: int) -> IntervalRow:
        return self.intervals[k]


def _summary(tau, tau_hat, th, th_hat, r, r_hat):
    if len(tau) == 0:
        return (float("nan"),) * 5
    return (100.0 * median_ttc_error(tau, tau_hat),
            float(theta_error(th, th_hat).mean()), float(radius_error(r, r_hat).mean()),
            float(theta_error_sq(th, th_hat).mean()), float(radius_error_sq(r, r_hat).mean()))


def interval_report(tau, tau_hat, theta_true, theta_hat, r_true, r_hat,
                    edges=BALL_EDGES_S) -> MetricReport:
    """Metrics overall and per countdown interval.

    ``edges`` run from the earliest countdown down to zero; interval ``k``
    holds samples with ``edges[k+1] <= tau < edges[k]`` (the first interval
    also takes ``tau == edges[0]``).  Samples outside ``[edges[-1], edges[0]]``
    are left out of every figure.  An empty interval is reported with ``n = 0``.
    """
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or any(a <= b for a, b in zip(edges, edges[1:])):
        raise ValueError("interval edges must be strictly decreasing")
    tau = np.asarray(tau, float)
    arrs = [np.asarray(a) for a in (tau_hat, theta_true, theta_hat, r_true, r_hat)]
    if any(len(a) != len(tau) for a in arrs):
        raise ValueError("metric inputs differ in length")
    keep = (tau >= edges[-1]) & (tau <= edges[0])
    rows = []
    for k, (hi, lo) in enumerate(zip(edges, edges[1:])):
        m = keep & (tau >= lo) & ((tau < hi) | ((k == 0) & (tau == hi)))
        rows.append(IntervalRow(hi, lo, int(m.sum()),
                                *_summary(tau[m], *(a[m] for a in arrs))))
    tau_hat = arrs[0]
    return MetricReport(*_summary(tau[keep], *(a[keep] for a in arrs)), int(keep.sum()), rows,
                        np.column_stack([tau[keep], np.asarray(tau_hat, float)[keep]]))


def records_report(records, theta_true, r_true, edges=BALL_EDGES_S, smoothed: bool = True) -> MetricReport:
    """:func:`interval_report` over prediction records sharing one true impact cell.

    ``theta_true``/``r_true`` may be scalars or per-record arrays.  With
    ``smoothed`` the posterior argmax is scored, otherwise the instantaneous one.
    """
    n = len(records)
    tt = np.broadcast_to(np.asarray(theta_true, np.int64), (n,))
    rt = np.broadcast_to(np.asarray(r_true, np.int64), (n,))
    th = [r.post_theta_bin if smoothed else r.theta_bin for r in records]
    rh = [r.post_r_bin if smoothed else r.r_bin for r in records]
    return interval_report([r.tau_true for r in records], [r.tau_hat for r in records],
                           tt, np.array(th, np.int64), rt, np.array(rh, np.int64), edges)
