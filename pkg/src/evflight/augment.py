"""Event-level augmentations driven by the known 3-D object motion.

A rotation about the optical axis is the same pixel rotation at every depth.
A lateral translation of the object is not: its image shift is
``f * delta / Z``, so the stream is cut into windows and each window is shifted
by the amount implied by the object's mean depth in that window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .camera import (R_BIN_EDGES_MM, CameraModel, Impact, Trajectory, impact_from_xy,
                     N_R_BINS)
from .events import EventStream
from .sim import IMPACT_DISK_RADIUS, Recording


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    kind: str                  # "translate" or "rotate"
    delta: tuple = (0.0, 0.0)  # metres, translate only
    angle: float = 0.0         # radians, rotate only
    window_us: int = 3000

    def __post_init__(self):
        if self.kind not in ("translate", "rotate"):
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.window_us <= 0:
            raise ValueError("window must be positive")

    @classmethod
    def rotate(cls, angle: float, window_us: int = 3000) -> "AugmentSpec":
        return cls("rotate", angle=float(angle) % (2 * math.pi), window_us=window_us)

    @classmethod
    def translate(cls, dx: float, dy: float, window_us: int = 3000) -> "AugmentSpec":
        return cls("translate", delta=(float(dx), float(dy)), window_us=window_us)

    def describe(self) -> str:
        if self.kind == "rotate":
            return f"rotate:{self.angle!r}"
        return f"translate:{self.delta[0]!r},{self.delta[1]!r}:{self.window_us}"


def _round_half_up(a):
    return np.floor(np.asarray(a, float) + 0.5).astype(np.int64)


def _keep_in_bounds(stream: EventStream, x, y) -> EventStream:
    ok = (x >= 0) & (x < stream.width) & (y >= 0) & (y < stream.height)
    return EventStream(stream.width, stream.height, x[ok], y[ok], stream.p[ok], stream.t[ok])


def rotate_events(stream: EventStream, angle: float, cam: CameraModel) -> EventStream:
    """Rotate event pixels by ``angle`` about the principal point; drop what leaves the sensor."""
    c, s = math.cos(angle), math.sin(angle)
    dx = stream.x.astype(float) - cam.cx
    dy = stream.y.astype(float) - cam.cy
    x = _round_half_up(c * dx - s * dy + cam.cx)
    y = _round_half_up(s * dx + c * dy + cam.cy)
    return _keep_in_bounds(stream, x, y)


def window_depths(traj: Trajectory, t0_us: int, n_windows: int, window_us: int,
                  points: int = 11) -> np.ndarray:
    """Mean object depth over each window ``[t0 + k*w, t0 + (k+1)*w)``."""
    starts = t0_us + np.arange(n_windows) * window_us
    grid = (starts[:, None] + np.linspace(0.0, window_us, points)[None, :]) * 1e-6
    return np.interp(grid, traj.t, traj.pos[:, 2]).mean(axis=1)


def window_shifts(traj: Trajectory, delta, cam: CameraModel, t_end_us: int,
                  window_us: int) -> np.ndarray:
    """Integer pixel shift ``(n_windows, 2)`` for a lateral world translation ``delta``."""
    n = int(t_end_us) // int(window_us) + 1
    z = window_depths(traj, 0, n, window_us)
    if np.any(z <= 0):
        raise AugmentError(f"object depth <= 0 in window {int(np.argmax(z <= 0))}")
    return np.stack([_round_half_up(cam.fx * delta[0] / z), _round_half_up(cam.fy * delta[1] / z)], axis=1)


def translate_events(stream: EventStream, traj: Trajectory, delta, cam: CameraModel,
                     window_us: int) -> EventStream:
    if len(stream) == 0 or (delta[0] == 0 and delta[1] == 0):
        return stream
    shifts = window_shifts(traj, delta, cam, int(stream.t[-1]), window_us)
    w = (stream.t // np.uint64(window_us)).astype(np.int64)
    x = stream.x.astype(np.int64) + shifts[w, 0]
    y = stream.y.astype(np.int64) + shifts[w, 1]
    return _keep_in_bounds(stream, x, y)


def relabel(impact: Impact, spec: AugmentSpec) -> Impact:
    """Impact label after ``spec``; time to collision is untouched."""
    x, y = impact.xy
    if spec.kind == "translate":
        return impact_from_xy(impact.t_impact, x + spec.delta[0], y + spec.delta[1])
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    return impact_from_xy(impact.t_impact, c * x - s * y, s * x + c * y)


def transform_trajectory(traj: Trajectory, spec: AugmentSpec) -> Trajectory:
    if spec.kind == "translate":
        return traj.translated(*spec.delta)
    c, s = math.cos(spec.angle), math.sin(spec.angle)
    pos = traj.pos.copy()
    pos[:, 0] = c * traj.pos[:, 0] - s * traj.pos[:, 1]
    pos[:, 1] = s * traj.pos[:, 0] + c * traj.pos[:, 1]
    return Trajectory(traj.t, pos)


def apply(rec: Recording, spec: AugmentSpec, name: str | None = None) -> Recording:
    """Augmented copy of a recording: events, trajectory and labels transformed together."""
    if spec.kind == "rotate":
        events = rotate_events(rec.events, spec.angle, rec.camera)
    else:
        events = translate_events(rec.events, rec.trajectory, spec.delta, rec.camera, spec.window_us)
    applied = rec.meta.get("augment", "")
    meta = {**rec.meta, "augment": (applied + ";" if applied else "") + spec.describe()}
    return Recording(name or rec.name, rec.kind, transform_trajectory(rec.trajectory, spec),
                     relabel(rec.impact, spec), rec.camera, events, meta)


def apply_all(rec: Recording, specs, name: str | None = None) -> Recording:
    for spec in specs:
        rec = apply(rec, spec)
    if name:
        rec = replace(rec, name=name)
    return rec


def sample_balanced(impact: Impact, rng: np.random.Generator, window_us: int = 3000,
                    r_max: float = IMPACT_DISK_RADIUS) -> list[AugmentSpec]:
    """Rotation plus radial translation landing in a uniformly drawn (r, theta) cell.

    The target radius bin is drawn uniformly, the radius uniformly within it
    (the outer bin is capped at ``r_max``) and the target angle uniformly.
    The translation is radial, so its length never exceeds ``r_max``.
    """
    edges = [e / 1000.0 for e in R_BIN_EDGES_MM] + [r_max]
    b = int(rng.integers(N_R_BINS))
    r_target = rng.uniform(edges[b], edges[b + 1])
    theta_target = rng.uniform(0.0, 2 * math.pi)
    r0 = impact.radius_m
    theta0 = math.atan2(impact.xy[1], impact.xy[0]) if r0 > 0 else 0.0
    dr = r_target - r0
    return [AugmentSpec.rotate(theta_target - theta0, window_us),
            AugmentSpec.translate(dr * math.cos(theta_target), dr * math.sin(theta_target), window_us)]


def relabel_all(impact: Impact, specs) -> Impact:
    for spec in specs:
        impact = relabel(impact, spec)
    return impact
