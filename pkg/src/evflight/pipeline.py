"""End-to-end experiment stages: simulate, augment, encode, train, evaluate, ablate."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import augment
from .camera import CameraModel
from .config import RunConfig
from .filterbank import FilterBankConfig, SampleSet, encode_stream, input_channels
from .inference import PredictionRecord, predict_stream
from .metrics import MetricReport, interval_report
from .nnet import LossWeights, Model, ModelConfig, TrainConfig, TrainingDiverged, train
from .nnet.model import ConvSpec
from .sim import Recording, SimConfig, build_dataset

log = logging.getLogger(__name__)


# --- config adapters ---------------------------------------------------------

def camera_for(cfg: RunConfig) -> CameraModel:
    return CameraModel.default(cfg["sim.camera_scale"])


def sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(noise_rate=cfg["sim.noise_rate"], micro_step_us=cfg["sim.micro_step_us"],
                     jitter_us=cfg["sim.jitter_us"], seed=cfg.seed_for("sim"))


def filter_config(cfg: RunConfig) -> FilterBankConfig:
    c = cfg["filter.crop"]
    return FilterBankConfig(cfg["filter.time_constants_us"], cfg["filter.dt_us"],
                            cfg["filter.output_period_us"], (c, c), cfg["filter.x_cap"],
                            cfg["filter.downscale"])


def model_config(cfg: RunConfig) -> ModelConfig:
    c = cfg["filter.crop"]
    return ModelConfig(in_channels=input_channels(cfg["filter.encoder"]), input_hw=(c, c),
                       convs=tuple(ConvSpec(w) for w in cfg["net.widths"]),
                       pool_after=cfg["net.pool_after"], pool_grid=cfg["net.pool_grid"],
                       head_hidden=cfg["net.head_hidden"], tau_scale=cfg["net.tau_scale"],
                       dtype=cfg["net.dtype"], seed=cfg.seed_for("net"), input_gain=cfg["net.input_gain"])


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg["net.epochs"], cfg["net.batch_size"], cfg["net.lr"], cfg.seed_for("train"),
                       LossWeights(cfg["net.w_ttc"], cfg["net.w_theta"], cfg["net.w_r"]))


# --- stages ------------------------------------------------------------------

def simulate(cfg: RunConfig, jobs: int = 1) -> dict[str, list[Recording]]:
    if not math.isclose(cfg["sim.test_fraction"], 0.2):
        log.warning("sim.test_fraction other than 0.2 is not supported; using 0.2")
    return build_dataset(cfg["sim.n"], cfg["run.kind"], cfg.seed_for("split"), camera_for(cfg),
                         sim_config(cfg), jobs)


def augment_recordings(recs: list[Recording], n_aug: int, rng: np.random.Generator,
                       window_us: int) -> list[Recording]:
    """Each recording followed by ``n_aug`` balanced (rotate, translate) copies."""
    out = []
    for rec in recs:
        out.append(rec)
        for k in range(n_aug):
            specs = augment.sample_balanced(rec.impact, rng, window_us)
            out.append(augment.apply_all(rec, specs, name=f"{rec.name}_aug{k:03d}"))
    return out


def countdown_times(rec: Recording, period_us: int, tau_max: float) -> np.ndarray:
    """Snapshot instants on the ``period_us`` grid with ``0 < tau <= tau_max``."""
    t_imp = rec.impact.t_impact
    lo = max(1, math.ceil(round((t_imp - tau_max) * 1e6 / period_us, 9)))
    hi = math.ceil(round(t_imp * 1e6 / period_us, 9)) - 1
    return (np.arange(lo, hi + 1) * period_us).astype(np.int64)


def encode_recordings(recs: list[Recording], cfg: RunConfig, stride: int = 1,
                      rng: np.random.Generator | None = None) -> SampleSet:
    """Labelled network inputs for every recording.

    With ``stride > 1`` every ``stride``-th countdown snapshot is kept,
    starting at a random phase per recording.
    """
    fb = filter_config(cfg)
    enc = cfg["filter.encoder"]
    sets = []
    for i, rec in enumerate(recs):
        times = countdown_times(rec, fb.output_period_us, cfg["data.tau_max"])
        if stride > 1 and len(times):
            phase = int(rng.integers(stride)) if rng is not None else 0
            times = times[phase::stride]
        if not len(times):
            continue
        x = encode_stream(rec.events, times, fb, enc, cfg["filter.bin_window_us"])
        n = len(times)
        sets.append(SampleSet(x, rec.impact.t_impact - times * 1e-6,
                              np.full(n, rec.impact.r_bin, np.int64),
                              np.full(n, rec.impact.theta_bin, np.int64), times, np.full(n, i, np.int64)))
    if not sets:
        raise ValueError("no samples inside the countdown horizon")
    return SampleSet.concat(sets)


@dataclass
class TrainedArm:
    model: Model
    history: list[dict]
    n_train: int
    seconds: float
    diverged: bool = False


def train_model(cfg: RunConfig, data: SampleSet, steps: int | None = None) -> TrainedArm:
    """Train a fresh model; ``steps`` (optimizer updates) overrides the epoch count if given."""
    tc = train_config(cfg)
    if steps is not None:
        per_epoch = math.ceil(len(data) / tc.batch_size)
        tc = replace(tc, epochs=max(1, round(steps / per_epoch)))
    model = Model(model_config(cfg))
    t0 = time.perf_counter()
    try:
        hist = train(model, data, tc)
        diverged = False
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        hist, diverged = exc.history, True
    return TrainedArm(model, hist, len(data), time.perf_counter() - t0, diverged)


@dataclass
class Evaluation:
    report: MetricReport
    records: list[list[PredictionRecord]] = field(default_factory=list)
    truths: list[tuple[int, int]] = field(default_factory=list)   # (theta_bin, r_bin) per stream


def predict_recording(model: Model, rec: Recording, cfg: RunConfig) -> list[PredictionRecord]:
    t_imp = rec.impact.t_impact
    t_start = max(0, int(math.ceil(round((t_imp - cfg["data.tau_max"]) * 1e6, 6))))
    records = predict_stream(rec.events, filter_config(cfg), model, cfg["eval.cadence_us"],
                             t_impact=t_imp, lam=cfg["eval.lambda"], encoder=cfg["filter.encoder"],
                             bin_window_us=cfg["filter.bin_window_us"], t_start_us=t_start)
    for r in records:
        r.theta_true, r.r_true = rec.impact.theta_bin, rec.impact.r_bin
    return records


def score(records: list[list[PredictionRecord]], truths: list[tuple[int, int]], edges,
          smoothed: bool = True) -> MetricReport:
    flat = [(r, th, rb) for recs, (th, rb) in zip(records, truths) for r in recs]
    pick_t = (lambda r: r.post_theta_bin) if smoothed else (lambda r: r.theta_bin)
    pick_r = (lambda r: r.post_r_bin) if smoothed else (lambda r: r.r_bin)
    return interval_report([f[0].tau_true for f in flat], [f[0].tau_hat for f in flat],
                           np.array([f[1] for f in flat], np.int64),
                           np.array([pick_t(f[0]) for f in flat], np.int64),
                           np.array([f[2] for f in flat], np.int64),
                           np.array([pick_r(f[0]) for f in flat], np.int64), edges)


def evaluate(model: Model, recs: list[Recording], cfg: RunConfig) -> Evaluation:
    records = [predict_recording(model, rec, cfg) for rec in recs]
    truths = [(rec.impact.theta_bin, rec.impact.r_bin) for rec in recs]
    return Evaluation(score(records, truths, cfg["eval.edges"], cfg["eval.smoothed"]), records, truths)


# --- whole experiments -------------------------------------------------------

@dataclass
class Prepared:
    cfg: RunConfig
    train_recs: list[Recording]
    test_recs: list[Recording]         # augmented held-out recordings


def prepare(cfg: RunConfig, dataset: dict[str, list[Recording]] | None = None, jobs: int = 1) -> Prepared:
    dataset = dataset or simulate(cfg, jobs)
    window = cfg["filter.output_period_us"]
    rng_tr = np.random.default_rng(cfg.seed_for("augment.train"))
    rng_te = np.random.default_rng(cfg.seed_for("augment.test"))
    n_aug = cfg["aug.per_recording"] if cfg["aug.enabled"] else 0
    train_recs = augment_recordings(dataset["train"], n_aug, rng_tr, window)
    test_recs = augment_recordings(dataset["test"], cfg["aug.test_per_recording"], rng_te, window)
    return Prepared(cfg, train_recs, test_recs)


@dataclass
class ArmResult:
    name: str
    cfg: RunConfig
    trained: TrainedArm
    evaluation: Evaluation

    @property
    def report(self) -> MetricReport:
        return self.evaluation.report


def run_arm(name: str, cfg: RunConfig, prep: Prepared, steps: int | None = None) -> ArmResult:
    t0 = time.perf_counter()
    recs = prep.train_recs if cfg["aug.enabled"] else [r for r in prep.train_recs if "augment" not in r.meta]
    data = encode_recordings(recs, cfg, cfg["data.stride"], np.random.default_rng(cfg.seed_for("encode")))
    log.info("arm %s: %d training samples encoded in %.1f s", name, len(data), time.perf_counter() - t0)
    trained = train_model(cfg, data, steps)
    ev = evaluate(trained.model, prep.test_recs, cfg)
    log.info("arm %s: theta %.1f deg, radius %.1f mm, ttc %.1f %% (%.0f s total)", name,
             ev.report.mean_theta_error_deg, ev.report.mean_radius_error_mm,
             ev.report.median_ttc_pct_error, time.perf_counter() - t0)
    return ArmResult(name, cfg, trained, ev)


ARMS = {
    "aug+exp": {},
    "no_exp": {"filter__encoder": "binned"},
    "no_aug": {"aug__enabled": "false"},
}


def ablation_run(cfg: RunConfig, arms=("aug+exp", "no_exp", "no_aug"), prep: Prepared | None = None,
                 done: dict[str, ArmResult] | None = None) -> dict[str, ArmResult]:
    """Train and evaluate each arm on the same recordings and held-out split.

    Arms listed in ``done`` are reused rather than retrained.  An arm whose
    training diverges is still evaluated and flagged via ``trained.diverged``.
    """
    prep = prep or prepare(cfg)
    out = dict(done or {})
    full_steps = None
    for name in arms:
        if name in out:
            continue
        arm_cfg = cfg.with_overrides(**ARMS[name])
        steps = None
        if name == "no_aug" and cfg["net.match_steps"]:
            if full_steps is None:
                n_full = len(encode_recordings(prep.train_recs, cfg, cfg["data.stride"],
                                               np.random.default_rng(cfg.seed_for("encode"))))
                full_steps = cfg["net.epochs"] * math.ceil(n_full / cfg["net.batch_size"])
            steps = full_steps
        out[name] = run_arm(name, arm_cfg, prep, steps)
    return out
