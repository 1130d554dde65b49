"""Flat ``key = value`` run configuration with per-module seed splitting."""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .filterbank import DEFAULT_TIME_CONSTANTS_US


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: str
    help: str
    kind: type = str


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


AUTO = "auto"

KEYS: dict[str, Key] = {
    "run.kind": Key("ball", "object kind: ball or dart"),
    "run.seed": Key("0", "global seed; EVFLIGHT_SEED overrides it", int),
    "sim.n": Key(AUTO, "recordings to simulate (auto: ball 150, dart 36)", int),
    "sim.test_fraction": Key("0.2", "share of whole trajectories held out for testing", float),
    "sim.camera_scale": Key("1.0", "sensor scale; 1.0 is 640x480 with f = 320 px", float),
    "sim.noise_rate": Key("0.1", "background noise events per pixel per second", float),
    "sim.micro_step_us": Key("100", "silhouette rendering step", int),
    "sim.jitter_us": Key("100", "event timestamp jitter", int),
    "filter.dt_us": Key("200", "filter update step", int),
    "filter.time_constants_us": Key(",".join(f"{t:g}" for t in DEFAULT_TIME_CONSTANTS_US),
                                    "filter time constants", _floats),
    "filter.output_period_us": Key(AUTO, "snapshot cadence (auto: ball 3000, dart 1000)", int),
    "filter.downscale": Key("2", "spatial average pooling factor", int),
    "filter.crop": Key("240", "side of the square center crop after pooling", int),
    "filter.x_cap": Key("4", "per-step event count saturation", float),
    "filter.encoder": Key("exp", "network input: exp (filterbank) or binned (2 channels)"),
    "filter.bin_window_us": Key("477", "window of the binned encoder", int),
    "aug.enabled": Key("true", "augment the training recordings", _bool),
    "aug.per_recording": Key(AUTO, "balanced augmentations per training recording (auto: ball 9, dart 39)", int),
    "aug.test_per_recording": Key(AUTO, "balanced augmentations per test recording (auto: ball 4, dart 9)", int),
    "data.tau_max": Key(AUTO, "longest countdown used for samples (auto: ball 0.3 s, dart 0.04 s)", float),
    "data.stride": Key("1", "keep every n-th snapshot of a training stream", int),
    "net.widths": Key("32,32,64,64,96,96,128", "output channels of the seven convolutions", _ints),
    "net.pool_after": Key("1,3", "convolutions (0-based) followed by 2x2 max pooling", _ints),
    "net.pool_grid": Key("5", "spatial grid kept by the final average pool", int),
    "net.input_gain": Key("1", "factor applied to the [0, 1] network input", float),
    "net.head_hidden": Key("64", "hidden units of each readout head", int),
    "net.dtype": Key("float64", "float64 or float32"),
    "net.tau_scale": Key(AUTO, "time-to-collision normalisation in s (auto: data.tau_max)", float),
    "net.lr": Key("1e-4", "Adam learning rate", float),
    "net.epochs": Key("10", "training epochs", int),
    "net.batch_size": Key("160", "mini-batch size", int),
    "net.w_ttc": Key("1", "weight of the time-to-collision loss", float),
    "net.w_theta": Key("1", "weight of the angle loss", float),
    "net.w_r": Key("1", "weight of the radius loss", float),
    "net.match_steps": Key("false", "no-augmentation arm trains for as many steps as the augmented arm", _bool),
    "eval.cadence_us": Key(AUTO, "prediction cadence (auto: filter.output_period_us)", int),
    "eval.edges": Key(AUTO, "countdown interval edges in s (auto: ball 0.3..0, dart 0.04..0)", _floats),
    "eval.lambda": Key("1.0", "forgetting exponent of the Bayesian smoother", float),
    "eval.smoothed": Key("true", "score the smoothed (posterior) bins instead of instantaneous ones", _bool),
    "eval.hough_r_min": Key("5", "smallest Hough radius (px)", int),
    "eval.hough_r_max": Key("60", "largest Hough radius (px)", int),
}

KIND_DEFAULTS = {
    "ball": {"sim.n": "150", "filter.output_period_us": "3000", "aug.per_recording": "9",
             "aug.test_per_recording": "4", "data.tau_max": "0.3", "eval.edges": "0.3,0.2,0.1,0"},
    "dart": {"sim.n": "36", "filter.output_period_us": "1000", "aug.per_recording": "39",
             "aug.test_per_recording": "9", "data.tau_max": "0.04", "eval.edges": "0.04,0.03,0.02,0.01,0"},
}

# CPU-scale profile: quarter-resolution sensor, 60x60 input, slimmer single-precision network.
PROFILES = {
    "full": {},
    "desk": {"sim.camera_scale": "0.25", "filter.crop": "60", "net.widths": "16,32,32,64,64,64,64",
             "net.pool_after": "0,2", "net.dtype": "float32", "net.lr": "1e-3", "net.batch_size": "32",
             "net.input_gain": "64", "net.epochs": "12",
             "data.stride": "10"},
}


class RunConfig:
    """Resolved configuration; read values with ``cfg["section.key"]``."""

    def __init__(self, values: dict[str, str] | None = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(KEYS)}")
        self.given = dict(values)
        self.raw = {k: key.default for k, key in KEYS.items()}
        self.raw.update(values)
        env = os.environ.get("EVFLIGHT_SEED")
        if env is not None:
            self.raw["run.seed"] = env
        kind = self.raw["run.kind"]
        if kind not in KIND_DEFAULTS:
            raise ConfigError(f"run.kind must be ball or dart, not {kind!r}")
        for k, v in KIND_DEFAULTS[kind].items():
            if self.raw[k] == AUTO:
                self.raw[k] = v
        if self.raw["net.tau_scale"] == AUTO:
            self.raw["net.tau_scale"] = self.raw["data.tau_max"]
        if self.raw["eval.cadence_us"] == AUTO:
            self.raw["eval.cadence_us"] = self.raw["filter.output_period_us"]
        self._values = {}
        for k, key in KEYS.items():
            try:
                self._values[k] = key.kind(self.raw[k])
            except ValueError as exc:
                raise ConfigError(f"{k} = {self.raw[k]!r}: {exc}") from None
        if self["filter.encoder"] not in ("exp", "binned"):
            raise ConfigError("filter.encoder must be exp or binned")
        if self["net.dtype"] not in ("float64", "float32"):
            raise ConfigError("net.dtype must be float64 or float32")

    def __getitem__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key}; valid keys: {', '.join(KEYS)}") from None

    def with_overrides(self, **kv) -> "RunConfig":
        """Copy with ``section__key=value`` overrides (``filter__encoder="binned"``)."""
        vals = dict(self.given)
        vals.update({k.replace("__", "."): str(v) for k, v in kv.items()})
        return RunConfig(vals)

    def seed_for(self, module: str) -> int:
        """Per-module seed: depends only on the global seed and the module name."""
        ss = np.random.SeedSequence([self["run.seed"], zlib.crc32(module.encode())])
        return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))

    def dumps(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in KEYS)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.raw == other.raw


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None,
                profile: str | None = None) -> RunConfig:
    """Profile values, then the file, then ``overrides``; later sources win."""
    vals: dict[str, str] = {}
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
        vals.update(PROFILES[profile])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        vals.update(parse_config_text(p.read_text(), str(p)))
    vals.update(overrides or {})
    return RunConfig(vals)


def desk_config(kind: str = "ball", **overrides) -> RunConfig:
    vals = {**PROFILES["desk"], "run.kind": kind}
    vals.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return RunConfig(vals)
