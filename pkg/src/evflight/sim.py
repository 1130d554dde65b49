"""Ballistic trajectories and a silhouette-occupancy DVS event simulator.

The simulator rasterises the projected object (disk for a ball, tapered
capsule for a dart) every micro-step.  Pixels that become covered emit events
of the leading polarity; pixels that become uncovered emit the opposite one.
"""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import (CameraModel, Impact, Trajectory, impact_solve, label_timesteps,
                     read_camera, write_camera)
from .events import EventStream, read_events, write_events

G = 9.81
BALL_HEIGHT_RANGE = (0.4, 1.2)
DART_SPEED_RANGE = (16.0, 23.4)
# Darts launched from 0.60-0.75 m span roughly the 26-46 ms flight times of the recorded shots.
DART_DISTANCE_RANGE = (0.60, 0.75)
IMPACT_DISK_RADIUS = 0.15


class SimulationError(ValueError):
    pass


class ObjectNotVisibleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    kind: str = "ball"
    radius: float = 0.025
    length: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ball", "dart"):
            raise ValueError(f"unknown object kind {self.kind!r}")
        if self.radius <= 0 or self.length < 0 or (self.kind == "dart" and self.length <= 0):
            raise ValueError("object dimensions must be positive")

    @classmethod
    def ball(cls, radius: float = 0.025) -> "ObjectSpec":
        return cls("ball", radius)

    @classmethod
    def dart(cls, radius: float = 0.01, length: float = 0.07) -> "ObjectSpec":
        return cls("dart", radius, length)

    @classmethod
    def for_kind(cls, kind: str) -> "ObjectSpec":
        return cls.ball() if kind == "ball" else cls.dart()


@dataclass(frozen=True)
class SimConfig:
    events_per_crossing: int = 1
    positive_leading: bool = True
    noise_rate: float = 0.1        # events / pixel / s
    micro_step_us: int = 100
    jitter_us: int = 100           # timestamps drawn from (t_k - jitter, t_k]
    z_near: float = 0.05           # stop rendering once the object is this close (m)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.micro_step_us <= 200:
            raise ValueError("micro_step_us must lie in (0, 200]")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be >= 0")
        if self.events_per_crossing < 1 or self.jitter_us < 0:
            raise ValueError("bad emission parameters")


def _sample_until_crossing(duration: float, rate_hz: float, position) -> Trajectory:
    n = int(math.floor(duration * rate_hz)) + 2
    t = np.arange(n) / rate_hz
    return Trajectory(t, position(t))


def gen_ball_trajectory(drop_height: float, lateral_offset=(0.0, 0.0), lateral_velocity=(0.0, 0.0),
                        rate_hz: float = 1000.0, height_range=BALL_HEIGHT_RANGE) -> Trajectory:
    """Ball released at rest (vertically) from ``drop_height`` above an upward-facing camera."""
    lo, hi = height_range
    if not lo <= drop_height <= hi:
        raise SimulationError(f"drop height {drop_height} outside [{lo}, {hi}] m")
    x0, y0 = lateral_offset
    vx, vy = lateral_velocity

    def position(t):
        return np.stack([x0 + vx * t, y0 + vy * t, drop_height - 0.5 * G * t * t], axis=1)

    return _sample_until_crossing(math.sqrt(2 * drop_height / G), rate_hz, position)


def gen_dart_trajectory(speed: float, aim_point=(0.0, 0.0), launch_distance: float = 0.7,
                        launch_offset=(0.0, 0.0), rate_hz: float = 1000.0,
                        speed_range=DART_SPEED_RANGE) -> Trajectory:
    """Dart fired along -Z from ``launch_distance``; gravity acts along camera +Y (image down).

    The lateral launch velocity is solved so that the dart crosses Z = 0 at ``aim_point``.
    """
    lo, hi = speed_range
    if not lo <= speed <= hi:
        raise SimulationError(f"dart speed {speed} outside [{lo}, {hi}] m/s")
    if launch_distance <= 0:
        raise SimulationError("dart trajectory never reaches the camera plane")
    T = launch_distance / speed
    x0, y0 = launch_offset
    vx = (aim_point[0] - x0) / T
    vy = (aim_point[1] - y0 - 0.5 * G * T * T) / T

    def position(t):
        return np.stack([x0 + vx * t, y0 + vy * t + 0.5 * G * t * t, launch_distance - speed * t], axis=1)

    return _sample_until_crossing(T, rate_hz, position)


def _uniform_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * math.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * math.pi)
    return np.array([r * math.cos(a), r * math.sin(a)])


def random_trajectory(kind: str, rng: np.random.Generator) -> tuple[Trajectory, dict]:
    """Draw launch parameters within the recorded datasets' ranges and build the trajectory."""
    aim = _uniform_disk(rng, IMPACT_DISK_RADIUS)
    if kind == "ball":
        h = rng.uniform(*BALL_HEIGHT_RANGE)
        v = _uniform_disk(rng, 0.05)
        T = math.sqrt(2 * h / G)
        params = dict(drop_height=h, lateral_offset=tuple(aim - v * T), lateral_velocity=tuple(v))
        return gen_ball_trajectory(**params), params
    if kind == "dart":
        params = dict(speed=rng.uniform(*DART_SPEED_RANGE), aim_point=tuple(aim),
                      launch_distance=rng.uniform(*DART_DISTANCE_RANGE),
                      launch_offset=tuple(_uniform_disk(rng, 0.03)))
        return gen_dart_trajectory(**params), params
    raise ValueError(f"unknown object kind {kind!r}")


# --- rasterisation ---------------------------------------------------------

def _silhouette(center, velocity, obj: ObjectSpec, cam: CameraModel):
    """Projected shape as (segment start uv, segment end uv, radius start, radius end) or None."""
    if obj.kind == "ball" or np.linalg.norm(velocity) == 0:
        ends = [np.asarray(center, float)] * 2
    else:
        d = np.asarray(velocity, float) / np.linalg.norm(velocity)
        ends = [center - 0.5 * obj.length * d, center + 0.5 * obj.length * d]
    if min(e[2] for e in ends) <= 1e-6:
        return None
    uv = [np.array([cam.fx * e[0] / e[2] + cam.cx, cam.fy * e[1] / e[2] + cam.cy]) for e in ends]
    rad = [cam.fx * obj.radius / e[2] for e in ends]
    return uv[0], uv[1], rad[0], rad[1]


def _bbox(shape, width, height):
    a, b, ra, rb = shape
    r = max(ra, rb)
    x0 = max(int(math.floor(min(a[0], b[0]) - r)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + r)) + 1, width)
    y0 = max(int(math.floor(min(a[1], b[1]) - r)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + r)) + 1, height)
    return x0, x1, y0, y1


def _raster(shape, box) -> np.ndarray:
    x0, x1, y0, y1 = box
    if x1 <= x0 or y1 <= y0:
        return np.zeros((max(y1 - y0, 0), max(x1 - x0, 0)), bool)
    a, b, ra, rb = shape
    px = np.arange(x0, x1, dtype=float)[None, :]
    py = np.arange(y0, y1, dtype=float)[:, None]
    seg = b - a
    ll = float(seg @ seg)
    if ll == 0:
        s = np.zeros((1, 1))
    else:
        s = np.clip(((px - a[0]) * seg[0] + (py - a[1]) * seg[1]) / ll, 0.0, 1.0)
    dx = px - (a[0] + s * seg[0])
    dy = py - (a[1] + s * seg[1])
    rad = ra + s * (rb - ra)
    return dx * dx + dy * dy <= rad * rad


def rasterize(center, velocity, obj: ObjectSpec, cam: CameraModel) -> np.ndarray:
    """Full-sensor boolean occupancy mask ``(height, width)`` of the object."""
    mask = np.zeros((cam.height, cam.width), bool)
    shape = _silhouette(center, velocity, obj, cam)
    if shape is not None:
        box = _bbox(shape, cam.width, cam.height)
        if box[1] > box[0] and box[3] > box[2]:
            mask[box[2]:box[3], box[0]:box[1]] = _raster(shape, box)
    return mask


def render_times(traj: Trajectory, obj: ObjectSpec, cfg: SimConfig) -> np.ndarray:
    """Micro-step times (s) while the object's nearest point is beyond ``z_near``."""
    dt = cfg.micro_step_us * 1e-6
    nearest = traj.pos[:, 2] - (obj.radius + 0.5 * obj.length)
    stop = np.flatnonzero(nearest <= cfg.z_near)
    t_end = traj.t[stop[0]] if len(stop) else traj.t[-1]
    if stop.size and stop[0] > 0:
        i = stop[0]
        frac = (nearest[i - 1] - cfg.z_near) / (nearest[i - 1] - nearest[i])
        t_end = traj.t[i - 1] + frac * (traj.t[i] - traj.t[i - 1])
    n = int(math.floor(t_end / dt + 1e-9)) + 1
    return np.arange(n) * dt


def occupancy_changes(traj: Trajectory, obj: ObjectSpec, cam: CameraModel, cfg: SimConfig):
    """Yield ``(step index, on_ys, on_xs, off_ys, off_xs)`` for every micro-step with changes."""
    times = render_times(traj, obj, cfg)
    if len(times) == 0:
        return
    pos = traj.position_at(times)
    vel = np.gradient(pos, times, axis=0) if len(times) > 1 else np.zeros_like(pos)
    occ = np.zeros((cam.height, cam.width), bool)
    prev_box = None
    for k in range(len(times)):
        shape = _silhouette(pos[k], vel[k], obj, cam)
        box = _bbox(shape, cam.width, cam.height) if shape is not None else None
        if box is not None and (box[1] <= box[0] or box[3] <= box[2]):
            box = None
        if box is None and prev_box is None:
            continue
        union = _union(box, prev_box)
        x0, x1, y0, y1 = union
        new = np.zeros((y1 - y0, x1 - x0), bool)
        if box is not None:
            bx0, bx1, by0, by1 = box
            new[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0] = _raster(shape, box)
        old = occ[y0:y1, x0:x1]
        on = new & ~old
        off = old & ~new
        occ[y0:y1, x0:x1] = new
        prev_box = box
        if k == 0:
            continue  # initial silhouette is the reference, not a change
        if on.any() or off.any():
            oy, ox = np.nonzero(on)
            fy, fx = np.nonzero(off)
            yield k, oy + y0, ox + x0, fy + y0, fx + x0


def _union(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3])


def synthesize_events(traj: Trajectory, obj: ObjectSpec, cam: CameraModel,
                      cfg: SimConfig = SimConfig()) -> EventStream:
    rng = np.random.default_rng(cfg.seed)
    lead = 1 if cfg.positive_leading else -1
    n = cfg.events_per_crossing
    xs, ys, ps, ks = [], [], [], []
    for k, oy, ox, fy, fx in occupancy_changes(traj, obj, cam, cfg):
        xs += [ox, fx]
        ys += [oy, fy]
        ps += [np.full(len(ox), lead, np.int8), np.full(len(fx), -lead, np.int8)]
        ks.append(np.full(len(ox) + len(fx), k, np.int64))
    if not ks:
        warnings.warn("object never changes any pixel; empty event stream", ObjectNotVisibleWarning)
        x = y = np.zeros(0, np.int64)
        p = np.zeros(0, np.int8)
        t = np.zeros(0, np.int64)
    else:
        x = np.repeat(np.concatenate(xs), n)
        y = np.repeat(np.concatenate(ys), n)
        p = np.repeat(np.concatenate(ps), n)
        t = np.repeat(np.concatenate(ks), n) * cfg.micro_step_us
        if cfg.jitter_us:
            t = np.maximum(t - rng.integers(0, cfg.jitter_us, len(t)), 0)
    span_us = int(render_times(traj, obj, cfg)[-1] * 1e6) if len(traj) else 0
    if cfg.noise_rate > 0 and span_us > 0:
        n_noise = rng.poisson(cfg.noise_rate * cam.width * cam.height * span_us * 1e-6)
        x = np.concatenate([x, rng.integers(0, cam.width, n_noise)])
        y = np.concatenate([y, rng.integers(0, cam.height, n_noise)])
        p = np.concatenate([p, rng.choice(np.array([-1, 1], np.int8), n_noise)])
        t = np.concatenate([t, rng.integers(0, span_us + 1, n_noise)])
    return EventStream.from_unsorted(cam.width, cam.height, x, y, p, t)


# --- recordings ------------------------------------------------------------

@dataclass(eq=False)
class Recording:
    name: str
    kind: str
    trajectory: Trajectory
    impact: Impact
    camera: CameraModel
    events: EventStream
    meta: dict = field(default_factory=dict)

    def labels(self) -> list[tuple[float, float, int, int]]:
        return [(t, tau, self.impact.r_bin, self.impact.theta_bin)
                for t, tau in label_timesteps(self.trajectory, self.impact.t_impact)]


def simulate_recording(name: str, kind: str, cam: CameraModel, cfg: SimConfig,
                       rng: np.random.Generator, obj: ObjectSpec | None = None) -> Recording:
    obj = obj or ObjectSpec.for_kind(kind)
    traj, params = random_trajectory(kind, rng)
    ev_cfg = replace(cfg, seed=int(rng.integers(2**63)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ObjectNotVisibleWarning)
        events = synthesize_events(traj, obj, cam, ev_cfg)
    meta = {"kind": kind, **{f"param.{k}": v for k, v in params.items()},
            **{f"object.{k}": v for k, v in asdict(obj).items()},
            **{f"sim.{k}": v for k, v in asdict(ev_cfg).items()}}
    return Recording(name, kind, traj, impact_solve(traj), cam, events, meta)


def split_indices(n: int, split_seed: int, test_fraction: float = 0.2) -> tuple[list[int], list[int]]:
    """Whole-trajectory split; the test share is rounded up."""
    if n < 5:
        raise ValueError("need at least 5 trajectories")
    n_test = math.ceil(round(n * test_fraction, 9))
    order = np.random.default_rng(split_seed).permutation(n)
    return sorted(order[n_test:].tolist()), sorted(order[:n_test].tolist())


def build_dataset(n: int, kind: str, split_seed: int, cam: CameraModel | None = None,
                  cfg: SimConfig = SimConfig(), jobs: int = 1) -> dict[str, list[Recording]]:
    """``n`` simulated recordings split 80/20 by trajectory.

    Recording ``i`` depends only on ``cfg.seed`` and ``i``, not on ``n``.
    """
    cam = cam or CameraModel.default()
    train_idx, test_idx = split_indices(n, split_seed)
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    jobs_args = [(f"{kind}_{i:04d}", kind, cam, cfg, seeds[i]) for i in range(n)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            recs = list(pool.map(_simulate_job, jobs_args))
    else:
        recs = [_simulate_job(a) for a in jobs_args]
    return {"train": [recs[i] for i in train_idx], "test": [recs[i] for i in test_idx]}


def _simulate_job(args) -> Recording:
    name, kind, cam, cfg, seed = args
    return simulate_recording(name, kind, cam, cfg, np.random.default_rng(seed))


def write_recording(rec: Recording, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_events(rec.events, d / "events.evf")
    with open(d / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z"])
        for t, p in zip(rec.trajectory.t, rec.trajectory.pos):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in p)])
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_i", "tau", "r_bin", "theta_bin"])
        for t, tau, rb, tb in rec.labels():
            w.writerow([repr(t), repr(tau), rb, tb])
    write_camera(rec.camera, d / "camera.txt")
    meta = {"name": rec.name, "kind": rec.kind, "t_impact": rec.impact.t_impact,
            "impact_x": rec.impact.xy[0], "impact_y": rec.impact.xy[1], **rec.meta}
    with open(d / "meta.txt", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {_fmt(v)}\n")
    return d


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def read_meta(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def read_recording(directory: str | os.PathLike) -> Recording:
    d = Path(directory)
    for f in ("events.evf", "trajectory.csv", "camera.txt", "meta.txt"):
        if not (d / f).exists():
            raise FileNotFoundError(f"missing {d / f}")
    arr = np.loadtxt(d / "trajectory.csv", delimiter=",", skiprows=1, ndmin=2)
    traj = Trajectory(arr[:, 0], arr[:, 1:4])
    meta = read_meta(d / "meta.txt")
    name, kind = meta.pop("name"), meta.pop("kind")
    for k in ("t_impact", "impact_x", "impact_y"):
        meta.pop(k, None)
    return Recording(name, kind, traj, impact_solve(traj), read_camera(d / "camera.txt"),
                     read_events(d / "events.evf"), meta)
