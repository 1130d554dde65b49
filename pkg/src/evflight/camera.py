"""Pinhole camera, rigid transforms and impact-plane geometry.

Camera frame: origin at the optical centre, +Z out of the sensor plane.  The
impact point of an object is where its centre crosses Z = 0.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Lower edges of the radius bins, in millimetres.
R_BIN_EDGES_MM = (0.0, 60.0, 91.0, 121.0)
N_R_BINS = 4
N_THETA_BINS = 12
THETA_BIN_DEG = 360.0 / N_THETA_BINS


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        if (np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(rot) - 1.0) > 1e-9):
            raise GeometryError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def default(cls, scale: float = 1.0) -> "CameraModel":
        """640x480 sensor with f = 320 px, shrunk by ``scale`` (0.25 gives 160x120)."""
        w, h = round(640 * scale), round(480 * scale)
        f = 320.0 * scale
        return cls(f, f, w / 2.0, h / 2.0, width=w, height=h)

    def world_to_cam(self, pts) -> np.ndarray:
        return np.asarray(pts, float) @ self.rotation.T + self.translation

    def cam_to_world(self, pts) -> np.ndarray:
        return (np.asarray(pts, float) - self.translation) @ self.rotation


def project(point, cam: CameraModel) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` of camera-frame point(s); trailing axis is XYZ."""
    p = np.asarray(point, float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("point behind camera plane")
    return np.stack([cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy], axis=-1)


def backproject(uv, depth, cam: CameraModel) -> np.ndarray:
    uv = np.asarray(uv, float)
    z = np.asarray(depth, float)
    x = (uv[..., 0] - cam.cx) * z / cam.fx
    y = (uv[..., 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def r_bin(radius_m: float) -> int:
    mm = round(radius_m * 1000.0, 9)
    if mm < 0:
        raise GeometryError("negative radius")
    return int(np.searchsorted(R_BIN_EDGES_MM, mm, side="right") - 1)


def theta_deg(x: float, y: float) -> float:
    return round(math.degrees(math.atan2(y, x)), 9) % 360.0


def theta_bin(x: float, y: float) -> int:
    return int(theta_deg(x, y) // THETA_BIN_DEG) % N_THETA_BINS


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    position: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Object centre positions (camera frame, metres) at times ``t`` (seconds)."""

    t: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, float).reshape(-1)
        pos = np.asarray(self.pos, float).reshape(-1, 3)
        if len(t) != len(pos):
            raise ValueError("time and position lengths differ")
        if np.any(np.diff(t) < 0):
            raise ValueError("trajectory samples must be sorted by time")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "pos", pos)

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample]) -> "Trajectory":
        return cls([s.t for s in samples], [s.position for s in samples])

    def samples(self) -> list[TrajectorySample]:
        return [TrajectorySample(float(t), tuple(map(float, p))) for t, p in zip(self.t, self.pos)]

    def __len__(self):
        return len(self.t)

    def position_at(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return np.stack([np.interp(t, self.t, self.pos[:, k]) for k in range(3)], axis=-1)

    def translated(self, dx: float, dy: float) -> "Trajectory":
        return Trajectory(self.t, self.pos + np.array([dx, dy, 0.0]))


def _as_trajectory(samples) -> Trajectory:
    if isinstance(samples, Trajectory):
        return samples
    return Trajectory.from_samples(list(samples))


@dataclass(frozen=True)
class Impact:
    t_impact: float
    xy: tuple[float, float]
    r_bin: int
    theta_bin: int

    @property
    def radius_m(self) -> float:
        return math.hypot(*self.xy)

    @property
    def theta_deg(self) -> float:
        return theta_deg(*self.xy)


def impact_from_xy(t_impact: float, x: float, y: float) -> Impact:
    return Impact(float(t_impact), (float(x), float(y)), r_bin(math.hypot(x, y)), theta_bin(x, y))


def impact_solve(samples: Trajectory | Iterable[TrajectorySample]) -> Impact:
    """Time and place where Z first goes from positive to non-positive (linear interpolation)."""
    traj = _as_trajectory(samples)
    z = traj.pos[:, 2]
    hits = np.flatnonzero((z[:-1] > 0) & (z[1:] <= 0))
    if len(hits) == 0:
        raise GeometryError("trajectory does not reach camera plane")
    i = hits[0]
    frac = z[i] / (z[i] - z[i + 1])
    t = traj.t[i] + frac * (traj.t[i + 1] - traj.t[i])
    xy = traj.pos[i, :2] + frac * (traj.pos[i + 1, :2] - traj.pos[i, :2])
    return impact_from_xy(t, xy[0], xy[1])


def label_timesteps(samples, t_impact: float) -> list[tuple[float, float]]:
    """``(t_i, tau_i)`` with ``tau_i = t_impact - t_i``; samples after impact are dropped."""
    traj = _as_trajectory(samples)
    keep = traj.t <= t_impact
    return [(float(t), float(t_impact - t)) for t in traj.t[keep]]


_ROT_KEYS = [f"r{i}{j}" for i in range(3) for j in range(3)]
_T_KEYS = ["t0", "t1", "t2"]


def write_camera(cam: CameraModel, path: str | os.PathLike) -> None:
    vals = {"fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
            "width": cam.width, "height": cam.height}
    vals.update(zip(_ROT_KEYS, map(float, cam.rotation.reshape(-1))))
    vals.update(zip(_T_KEYS, map(float, cam.translation)))
    with open(path, "w") as fh:
        for k, v in vals.items():
            fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")


def read_camera(path: str | os.PathLike) -> CameraModel:
    vals = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = v
    missing = [k for k in ["fx", "fy", "cx", "cy", *_ROT_KEYS, *_T_KEYS] if k not in vals]
    if missing:
        raise GeometryError(f"{path}: missing keys {missing}")
    return CameraModel(
        float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
        np.array([float(vals[k]) for k in _ROT_KEYS]).reshape(3, 3),
        np.array([float(vals[k]) for k in _T_KEYS]),
        width=int(vals.get("width", 640)), height=int(vals.get("height", 480)),
    )
