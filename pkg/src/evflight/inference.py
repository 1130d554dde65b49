"""Streaming prediction and recursive Bayesian smoothing of the impact-location heads."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import N_R_BINS, N_THETA_BINS, R_BIN_EDGES_MM
from .events import EventStream
from .filterbank import FilterBank, FilterBankConfig, binned_snapshot
from .nnet.layers import softmax
from .nnet.model import Model

log = logging.getLogger(__name__)


class PosteriorUnderflowWarning(RuntimeWarning):
    pass


@dataclass
class Posterior:
    p_theta: np.ndarray = field(default_factory=lambda: np.full(N_THETA_BINS, 1.0 / N_THETA_BINS))
    p_r: np.ndarray = field(default_factory=lambda: np.full(N_R_BINS, 1.0 / N_R_BINS))
    update_count: int = 0

    @classmethod
    def uniform(cls) -> "Posterior":
        return cls()


def _log_update(prior: np.ndarray, like: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0:
        return like / like.sum()
    with np.errstate(divide="ignore"):
        lp = lam * np.log(prior) if lam else np.zeros_like(prior)
        lp = lp + np.log(like)
    top = lp.max()
    if not np.isfinite(top):
        warnings.warn("posterior underflow; reset to likelihood", PosteriorUnderflowWarning)
        return like / like.sum()
    post = np.exp(lp - top)
    return post / post.sum()


def _validate(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, float)
    if np.any(p < 0) or not np.isfinite(p).all() or p.sum() <= 0:
        raise ValueError(f"{name} is not a probability vector")
    return p


def bayes_update(post: Posterior, p_theta, p_r, lam: float = 1.0) -> Posterior:
    """``posterior_k  ∝  prior_k ** lam * likelihood_k``, evaluated in the log domain."""
    p_theta = _validate(p_theta, "theta likelihood")
    p_r = _validate(p_r, "radius likelihood")
    return Posterior(_log_update(post.p_theta, p_theta, lam), _log_update(post.p_r, p_r, lam),
                     post.update_count + 1)


def bayes_update_direct(post: Posterior, p_theta, p_r, lam: float = 1.0) -> Posterior:
    """Plain-probability form of :func:`bayes_update` (reference only; underflows quickly)."""
    t = post.p_theta ** lam * np.asarray(p_theta, float)
    r = post.p_r ** lam * np.asarray(p_r, float)
    return Posterior(t / t.sum(), r / r.sum(), post.update_count + 1)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, float)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class PredictionRecord:
    t: float                    # seconds since stream start
    tau_hat: float
    p_theta: np.ndarray
    p_r: np.ndarray
    posterior: Posterior
    tau_true: float = float("nan")
    latency_s: float = 0.0
    theta_true: int = -1        # true bins when known, -1 otherwise
    r_true: int = -1

    @property
    def theta_bin(self) -> int:
        return int(np.argmax(self.p_theta))

    @property
    def r_bin(self) -> int:
        return int(np.argmax(self.p_r))

    @property
    def post_theta_bin(self) -> int:
        return int(np.argmax(self.posterior.p_theta))

    @property
    def post_r_bin(self) -> int:
        return int(np.argmax(self.posterior.p_r))


def predict_stream(events: EventStream, fb_config: FilterBankConfig, model: Model, cadence_us: int,
                   t_end_us: int | None = None, t_impact: float | None = None, lam: float = 1.0,
                   encoder: str = "exp", bin_window_us: int = 477,
                   t_start_us: int = 0) -> list[PredictionRecord]:
    """Run the filterbank over ``events`` and predict at every ``cadence_us``.

    The filter always runs from time zero; predictions (and the uniform
    posterior) start at the first cadence instant at or after ``t_start_us``.
    Without ``t_end_us`` the stream runs to its last event.  With
    ``t_impact`` (s) the true countdown is attached and no snapshot is taken
    after impact.
    """
    if cadence_us % fb_config.dt_us:
        raise ValueError("cadence must be a multiple of the filter step")
    in_ch = 20 if encoder == "exp" else 2
    if model.config.in_channels != in_ch or tuple(model.config.input_hw) != tuple(fb_config.crop):
        raise ValueError(f"model input {model.config.in_channels}x{model.config.input_hw} does not "
                         f"match encoder output {in_ch}x{fb_config.crop}")
    if t_end_us is None:
        if len(events) == 0:
            return []
        t_end_us = int(events.t[-1]) + 1
    if t_impact is not None:
        t_end_us = min(t_end_us, int(math.floor(t_impact * 1e6)))
    fb = FilterBank(fb_config, events.width, events.height) if encoder == "exp" else None
    post = Posterior.uniform()
    records = []
    first = max(cadence_us, -(-int(t_start_us) // cadence_us) * cadence_us)
    for t_us in range(first, t_end_us + 1, cadence_us):
        t0 = time.perf_counter()
        if fb is not None:
            fb.advance(events, t_us)
            x = fb.quantized()
        else:
            x = binned_snapshot(events, t_us, fb_config, bin_window_us)
        tau_hat, zt, zr = model.predict(x[None])
        pt, pr = softmax(zt[0]), softmax(zr[0])
        post = bayes_update(post, pt, pr, lam)
        t_s = t_us * 1e-6
        records.append(PredictionRecord(
            t_s, float(tau_hat[0]), pt, pr, post,
            tau_true=(t_impact - t_s) if t_impact is not None else float("nan"),
            latency_s=time.perf_counter() - t0))
    if records:
        log.info("predict_stream: %d records, mean latency %.2f ms", len(records),
                 1e3 * np.mean([r.latency_s for r in records]))
    return records


@dataclass
class WindowEstimate:
    theta_bin: int
    r_bin: int
    posterior: Posterior
    theta_dispersion_deg: float
    r_dispersion_mm: float
    n_records: int


def windowed_estimate(records: list[PredictionRecord], t_start: float, t_end: float,
                      lam: float = 1.0) -> WindowEstimate:
    """Fuse only the records with ``t_start <= t <= t_end`` starting from a flat prior."""
    sel = [r for r in records if t_start <= r.t <= t_end]
    if not sel:
        raise ValueError(f"no records in window [{t_start}, {t_end}]")
    post = Posterior.uniform()
    for r in sel:
        post = bayes_update(post, r.p_theta, r.p_r, lam)
    tb, rb = int(np.argmax(post.p_theta)), int(np.argmax(post.p_r))
    d = (np.array([r.theta_bin for r in sel]) - tb + N_THETA_BINS // 2) % N_THETA_BINS - N_THETA_BINS // 2
    radii = np.array([R_BIN_EDGES_MM[r.r_bin] for r in sel])
    return WindowEstimate(tb, rb, post, float(np.std(d * 30.0)), float(np.std(radii)), len(sel))


def write_predictions(records: list[PredictionRecord], path: str | os.PathLike) -> None:
    head = (["t_s", "tau_hat_s", "tau_true_s"]
            + [f"p_theta_{k}" for k in range(N_THETA_BINS)] + [f"p_r_{k}" for k in range(N_R_BINS)]
            + [f"post_theta_{k}" for k in range(N_THETA_BINS)] + [f"post_r_{k}" for k in range(N_R_BINS)]
            + ["theta_bin", "r_bin", "post_theta_bin", "post_r_bin", "theta_true", "r_true"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for r in records:
            w.writerow([repr(r.t), repr(r.tau_hat), repr(r.tau_true)]
                       + [repr(float(v)) for v in (*r.p_theta, *r.p_r,
                                                   *r.posterior.p_theta, *r.posterior.p_r)]
                       + [r.theta_bin, r.r_bin, r.post_theta_bin, r.post_r_bin, r.theta_true, r.r_true])


def read_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pt = np.array([float(row[f"p_theta_{k}"]) for k in range(N_THETA_BINS)])
            pr = np.array([float(row[f"p_r_{k}"]) for k in range(N_R_BINS)])
            post = Posterior(np.array([float(row[f"post_theta_{k}"]) for k in range(N_THETA_BINS)]),
                             np.array([float(row[f"post_r_{k}"]) for k in range(N_R_BINS)]))
            out.append(PredictionRecord(float(row["t_s"]), float(row["tau_hat_s"]), pt, pr, post,
                                        tau_true=float(row["tau_true_s"]),
                                        theta_true=int(row.get("theta_true", -1)),
                                        r_true=int(row.get("r_true", -1))))
    return out
