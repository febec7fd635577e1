"""Small 2D geometry helpers: poses, polylines, oriented boxes.

Angles are radians, counterclockwise, with 0 pointing along +x.
Points are numpy arrays of shape (..., 2) in meters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose:
    """A 2D rigid frame: position plus heading."""

    x: float
    y: float
    heading: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Map world-frame points into this pose's frame."""
        pts = np.asarray(points, dtype=float)
        d = pts - self.position
        c, s = np.cos(self.heading), np.sin(self.heading)
        out = np.empty_like(d)
        out[..., 0] = c * d[..., 0] + s * d[..., 1]
        out[..., 1] = -s * d[..., 0] + c * d[..., 1]
        return out

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Map points in this pose's frame back to the world frame."""
        pts = np.asarray(points, dtype=float)
        c, s = np.cos(self.heading), np.sin(self.heading)
        out = np.empty_like(pts)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        return out


@dataclass(frozen=True)
class OrientedBox:
    """Axis box (length along heading, width across) centered at (cx, cy)."""

    cx: float
    cy: float
    length: float
    width: float
    heading: float

    def corners(self) -> np.ndarray:
        """Corner coordinates, shape (4, 2), counterclockwise."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return Pose(self.cx, self.cy, self.heading).to_world(local)


def box_corners(cx, cy, length, width, heading) -> np.ndarray:
    return OrientedBox(cx, cy, length, width, heading).corners()


def _project_extents(corners: np.ndarray, axes: np.ndarray):
    # corners (..., 4, 2), axes (..., A, 2) -> (min, max) each (..., A)
    proj = np.einsum("...ci,...ai->...ac", corners, axes)
    return proj.min(axis=-1), proj.max(axis=-1)


def boxes_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (4, 2)."""
    return bool(boxes_overlap_batch(corners_a[None], corners_b[None])[0])


def boxes_overlap_batch(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Vectorized separating-axis test.

    corners_a, corners_b: broadcastable stacks of shape (..., 4, 2).
    Returns a boolean array of the broadcast batch shape. Touching
    boundaries count as overlap.
    """
    a = np.asarray(corners_a, dtype=float)
    b = np.asarray(corners_b, dtype=float)
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = np.broadcast_to(a, batch + (4, 2))
    b = np.broadcast_to(b, batch + (4, 2))
    # Two unique edge directions per rectangle -> 4 candidate axes.
    ea = np.stack([a[..., 1, :] - a[..., 0, :], a[..., 2, :] - a[..., 1, :]], axis=-2)
    eb = np.stack([b[..., 1, :] - b[..., 0, :], b[..., 2, :] - b[..., 1, :]], axis=-2)
    edges = np.concatenate([ea, eb], axis=-2)
    # Normals; avoid dividing by zero length for degenerate boxes.
    axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    norm = np.linalg.norm(axes, axis=-1, keepdims=True)
    axes = axes / np.where(norm > 0.0, norm, 1.0)
    amin, amax = _project_extents(a, axes)
    bmin, bmax = _project_extents(b, axes)
    separated = (amax < bmin) | (bmax < amin)
    return ~separated.any(axis=-1)


# --- polylines -------------------------------------------------------------

def cumulative_arclength(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_length(points: np.ndarray) -> float:
    return float(cumulative_arclength(points)[-1])


def point_at_arclength(points: np.ndarray, s: float):
    """Point and tangent heading at arc position ``s`` (clamped to ends)."""
    pts = np.asarray(points, dtype=float)
    cum = cumulative_arclength(pts)
    s = float(np.clip(s, 0.0, cum[-1]))
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(max(i, 0), len(pts) - 2)
    seg_len = cum[i + 1] - cum[i]
    frac = 0.0 if seg_len <= 0.0 else (s - cum[i]) / seg_len
    p = pts[i] + frac * (pts[i + 1] - pts[i])
    d = pts[i + 1] - pts[i]
    return p, float(np.arctan2(d[1], d[0]))


def project_to_polyline(points: np.ndarray, p) -> tuple[float, float]:
    """Arc position and distance of the closest point on the polyline to p."""
    pts = np.asarray(points, dtype=float)
    p = np.asarray(p, dtype=float)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0.0, denom, 1.0)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    dists = np.linalg.norm(closest - p, axis=1)
    i = int(np.argmin(dists))
    cum = cumulative_arclength(pts)
    seg_len = np.linalg.norm(ab[i])
    return float(cum[i] + t[i] * seg_len), float(dists[i])


def points_to_polyline_distance(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Distance from each query point (..., 2) to a polyline (N, 2)."""
    pts = np.asarray(points, dtype=float)
    q = np.asarray(query, dtype=float)
    flat = q.reshape(-1, 2)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom > 0.0, denom, 1.0)
    # (Q, S) parameter of the projection of each query on each segment
    t = (np.einsum("qj,sj->qs", flat, ab) - np.einsum("sj,sj->s", a, ab)) / denom
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(closest - flat[:, None, :], axis=2).min(axis=1)
    return d.reshape(q.shape[:-1])


def offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    """Offset a polyline to its left (positive) or right (negative) side.

    Uses averaged vertex normals with a miter correction, adequate for the
    gently curved centerlines used here.
    """
    pts = np.asarray(points, dtype=float)
    d = np.diff(pts, axis=0)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = d / np.where(norm > 0.0, norm, 1.0)
    # Left normal of each segment.
    seg_n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    vert_n = np.empty_like(pts)
    vert_n[0] = seg_n[0]
    vert_n[-1] = seg_n[-1]
    if len(pts) > 2:
        avg = seg_n[:-1] + seg_n[1:]
        avg_norm = np.linalg.norm(avg, axis=1, keepdims=True)
        avg = avg / np.where(avg_norm > 0.0, avg_norm, 1.0)
        # Miter scale, capped to stay sane at sharp corners.
        cos_half = np.clip(np.einsum("ij,ij->i", avg, seg_n[:-1]), 0.5, 1.0)
        vert_n[1:-1] = avg / cos_half[:, None]
    return pts + offset * vert_n


def polygon_from_centerline(points: np.ndarray, width: float) -> np.ndarray:
    """Closed ring (first point not repeated) of a constant-width corridor."""
    left = offset_polyline(points, 0.5 * width)
    right = offset_polyline(points, -0.5 * width)
    return np.concatenate([left, right[::-1]], axis=0)


def arc_points(center, radius: float, theta0: float, theta1: float, n: int) -> np.ndarray:
    """Sample an arc of a circle from theta0 to theta1 (n points)."""
    c = np.asarray(center, dtype=float)
    ts = np.linspace(theta0, theta1, n)
    return c + radius * np.stack([np.cos(ts), np.sin(ts)], axis=1)


class PathCache:
    """A polyline with precomputed arc lengths for repeated lookups."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float)
        self.cum = cumulative_arclength(self.points)
        self.length = float(self.cum[-1])
        d = np.diff(self.points, axis=0)
        self._seg = d
        self._seg_len = np.linalg.norm(d, axis=1)
        self._denom = np.where(self._seg_len > 0.0, self._seg_len**2, 1.0)

    def point_at(self, s: float):
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.points) - 2)
        seg_len = self._seg_len[i]
        frac = 0.0 if seg_len <= 0.0 else (s - self.cum[i]) / seg_len
        p = self.points[i] + frac * self._seg[i]
        d = self._seg[i]
        return p, float(np.arctan2(d[1], d[0]))

    def project(self, p) -> tuple[float, float]:
        p = np.asarray(p, dtype=float)
        rel = p - self.points[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, self._seg) / self._denom, 0.0, 1.0)
        closest = self.points[:-1] + t[:, None] * self._seg
        dists = np.linalg.norm(closest - p, axis=1)
        i = int(np.argmin(dists))
        return float(self.cum[i] + t[i] * self._seg_len[i]), float(dists[i])
