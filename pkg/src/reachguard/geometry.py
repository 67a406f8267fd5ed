"""Polyline arclength frames and oriented rectangles."""
from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from .errors import OutOfBandError

Point = Tuple[float, float]


def as_points(points: Sequence[Sequence[float]]) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected a sequence of 2-D points")
    return arr


def cumulative_arclength(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


class Polyline:
    """A planar polyline with an arclength parametrisation.

    Positive lateral offsets lie to the left of the direction of travel.
    """

    def __init__(self, points: Sequence[Sequence[float]]):
        pts = as_points(points)
        if len(pts) < 2:
            raise ValueError("polyline needs at least two points")
        self.points = pts
        self.arclengths = cumulative_arclength(pts)
        if np.any(np.diff(self.arclengths) <= 0):
            raise ValueError("polyline has repeated consecutive points")
        d = np.diff(pts, axis=0)
        self._seg_len = np.diff(self.arclengths)
        self._tangents = d / self._seg_len[:, None]
        self._a = pts[:-1]

    @property
    def length(self) -> float:
        return float(self.arclengths[-1])

    def project(self, point: Sequence[float], band: float = 50.0) -> Tuple[float, float]:
        """Nearest-point projection onto the polyline, returning ``(s, d)``.

        Segment endpoints are clamped; ties resolve to the smaller arclength.
        """
        p = np.asarray(point, dtype=float)
        rel = p - self._a
        t = np.einsum("ij,ij->i", rel, self._tangents)
        t = np.clip(t, 0.0, self._seg_len)
        foot = self._a + self._tangents * t[:, None]
        dist = np.linalg.norm(p - foot, axis=1)
        # argmin returns the first minimum, i.e. the smallest arclength on ties
        i = int(np.argmin(dist))
        if dist[i] > band:
            raise OutOfBandError(f"point {tuple(p)} is {dist[i]:.3f} m from the centerline (band {band} m)")
        tx, ty = self._tangents[i]
        rx, ry = p - foot[i]
        cross = tx * ry - ty * rx
        d = math.copysign(float(dist[i]), cross) if dist[i] > 0 else 0.0
        return float(self.arclengths[i] + t[i]), d

    def project_many(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Unbounded projection of an ``(n, 2)`` array; same conventions as :meth:`project`."""
        p = as_points(points)
        rel = p[:, None, :] - self._a[None, :, :]
        t = np.clip(np.einsum("nmk,mk->nm", rel, self._tangents), 0.0, self._seg_len[None, :])
        foot = self._a[None, :, :] + self._tangents[None, :, :] * t[:, :, None]
        diff = p[:, None, :] - foot
        dist = np.linalg.norm(diff, axis=2)
        i = np.argmin(dist, axis=1)
        rows = np.arange(len(p))
        tang = self._tangents[i]
        dv = diff[rows, i]
        cross = tang[:, 0] * dv[:, 1] - tang[:, 1] * dv[:, 0]
        d = np.where(cross < 0, -dist[rows, i], dist[rows, i])
        return self.arclengths[i] + t[rows, i], d

    def _segment_index(self, s: float) -> int:
        i = int(np.searchsorted(self.arclengths, s, side="right")) - 1
        return min(max(i, 0), len(self._seg_len) - 1)

    def point_at(self, s: float, d: float = 0.0) -> Point:
        """Back-projection of curvilinear coordinates to the plane (extrapolates linearly)."""
        i = self._segment_index(s)
        tx, ty = self._tangents[i]
        base = self._a[i] + self._tangents[i] * (s - self.arclengths[i])
        return float(base[0] - ty * d), float(base[1] + tx * d)

    def heading_at(self, s: float) -> float:
        tx, ty = self._tangents[self._segment_index(s)]
        return math.atan2(ty, tx)


def rectangle(center: Sequence[float], theta: float, length: float, width: float) -> Polygon:
    cx, cy = center
    c, s = math.cos(theta), math.sin(theta)
    hl, hw = length / 2.0, width / 2.0
    corners = []
    for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        corners.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
    return Polygon(corners)


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi
