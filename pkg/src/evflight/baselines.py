"""Classical frame-based size estimators: Hough circle voting and convex-hull diameter."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .events import CountFrame


class InsufficientEvents(ValueError):
    pass


def active_points(frame: CountFrame | np.ndarray, threshold: int = 1) -> np.ndarray:
    """``(N, 2)`` array of ``(x, y)`` pixels whose total count reaches ``threshold``."""
    counts = (frame.pos.astype(np.int64) + frame.neg) if isinstance(frame, CountFrame) else np.asarray(frame)
    ys, xs = np.nonzero(counts >= threshold)
    return np.column_stack([xs, ys]).astype(float)


@dataclass
class HoughCircle:
    cx: float
    cy: float
    radius: float
    votes: float
    support: float  # votes / expected votes for a complete circle


def hough_circle(points: np.ndarray, shape: tuple[int, int], r_range=(5, 60), center_step: int = 2,
                 radius_step: int = 1) -> HoughCircle:
    """Accumulator argmax over a ``(cy, cx, r)`` grid.

    Each point votes once per accumulator cell for the centers on a circle
    of radius ``r`` around it.  A coarse center cell accepts neighbouring
    radii equally, so the radius is then settled by a ``radius_step``
    histogram of point distances to the winning center.
    """
    if len(points) < 3:
        raise InsufficientEvents("insufficient events for a circle fit")
    h, w = shape
    gh, gw = -(-h // center_step), -(-w // center_step)
    pid = np.arange(len(points))[:, None]
    best = (-1, 0)
    for r in range(int(r_range[0]), int(r_range[1]) + 1, radius_step):
        n_ang = max(8, int(math.ceil(2 * math.pi * r / (center_step / 2))))
        ang = np.linspace(0, 2 * math.pi, n_ang, endpoint=False)
        cx = np.rint((points[:, :1] + r * np.cos(ang)) / center_step).astype(np.int64)
        cy = np.rint((points[:, 1:] + r * np.sin(ang)) / center_step).astype(np.int64)
        ok = (cx >= 0) & (cx < gw) & (cy >= 0) & (cy < gh)
        cell = cy * gw + cx
        uniq = np.unique((np.broadcast_to(pid, cell.shape) * (gh * gw) + cell)[ok])
        acc = np.bincount(uniq % (gh * gw), minlength=gh * gw)
        k = int(acc.argmax())
        if acc[k] > best[0]:
            best = (int(acc[k]), k)
    votes, k = best
    cy, cx = divmod(k, gw)
    radii = np.arange(int(r_range[0]), int(r_range[1]) + 1, radius_step)
    fit = None
    half = center_step // 2
    for oy in range(-half, half + 1):       # settle the center to one pixel as well
        for ox in range(-half, half + 1):
            x0, y0 = cx * center_step + ox, cy * center_step + oy
            dist = np.hypot(points[:, 0] - x0, points[:, 1] - y0)
            hist = np.array([(np.abs(dist - r) <= radius_step / 2).sum() for r in radii])
            j = int(hist.argmax())
            if fit is None or hist[j] > fit[0]:
                fit = (int(hist[j]), x0, y0, float(radii[j]))
    n, x0, y0, r = fit
    return HoughCircle(float(x0), float(y0), r, float(votes), n / (2 * math.pi * r))


def hough_circle_baseline(frame: CountFrame, r_range=(5, 60), threshold: int = 1) -> HoughCircle:
    return hough_circle(active_points(frame, threshold), (frame.pos.shape[0], frame.pos.shape[1]), r_range)


def hull_diameter(points: np.ndarray) -> float:
    """Effective diameter ``2 * sqrt(A / pi)`` of the convex hull of ``points``."""
    if len(points) < 3:
        raise InsufficientEvents("insufficient events for a convex hull")
    try:
        hull = ConvexHull(points)
    except QhullError as exc:  # all points collinear
        raise InsufficientEvents(f"degenerate point set: {exc.args[0].splitlines()[0]}") from exc
    return 2.0 * math.sqrt(hull.volume / math.pi)   # in 2-D, ``volume`` is the area


def convexhull_baseline(frame: CountFrame, threshold: int = 1) -> float:
    return hull_diameter(active_points(frame, threshold))


def expansion_ttc(t, diameter) -> np.ndarray:
    """Time to collision from apparent size growth, ``d / (dd/dt)``; nan where the size is not growing."""
    t = np.asarray(t, float)
    d = np.asarray(diameter, float)
    if len(t) < 2:
        return np.full(len(t), np.nan)
    rate = np.gradient(d, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(rate > 0, d / rate, np.nan)
