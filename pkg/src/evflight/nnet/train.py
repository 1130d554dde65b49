from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..filterbank import SampleSet
from .model import LossWeights, Model, NonFiniteError, loss
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 160
    lr: float = 1e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def _to_input(x: np.ndarray, dtype) -> np.ndarray:
    return x.astype(dtype) / 255.0 if x.dtype == np.uint8 else x.astype(dtype)


def evaluate_loss(model: Model, data: SampleSet, weights: LossWeights, batch: int = 64) -> dict:
    """Sample-weighted mean of each loss term over ``data``."""
    sums = np.zeros(4)
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        out = model.forward(_to_input(data.x[sl], model.config.dtype))
        res = loss(out, data.tau[sl], data.r_bin[sl], data.theta_bin[sl], weights, model.config.tau_scale)
        sums += len(out[0]) * np.array([res.total, res.ttc, res.theta, res.r])
    sums /= max(len(data), 1)
    return dict(zip(("L", "L_ttc", "L_theta", "L_r"), sums.tolist()))


def train(model: Model, data: SampleSet, cfg: TrainConfig = TrainConfig(),
          val: SampleSet | None = None, state: AdamState | None = None) -> list[dict]:
    """Mini-batch Adam; returns per-epoch rows ``{epoch, split, L, L_ttc, L_theta, L_r}``."""
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamState(lr=cfg.lr)
    history: list[dict] = []
    dtype = model.config.dtype
    for epoch in range(cfg.epochs):
        sums, seen = np.zeros(4), 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            try:
                out = model.forward(_to_input(data.x[idx], dtype))
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), history) from exc
            res = loss(out, data.tau[idx], data.r_bin[idx], data.theta_bin[idx], cfg.weights,
                       model.config.tau_scale)
            if not math.isfinite(res.total):
                raise TrainingDiverged(f"loss became {res.total} in epoch {epoch}", history)
            model.backward(res.d_tau, res.d_theta, res.d_r)
            adam_step(model.params, model.grads, state)
            sums += len(idx) * np.array([res.total, res.ttc, res.theta, res.r])
            seen += len(idx)
        row = dict(zip(("L", "L_ttc", "L_theta", "L_r"), (sums / seen).tolist()))
        history.append({"epoch": epoch, "split": "train", **row})
        if val is not None and len(val):
            history.append({"epoch": epoch, "split": "val", **evaluate_loss(model, val, cfg.weights)})
        log.info("epoch %d %s", epoch, history[-1])
    return history


HISTORY_FIELDS = ["epoch", "split", "L", "L_ttc", "L_theta", "L_r"]


def write_history(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
