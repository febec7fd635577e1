"""Actor-frame raster masks over lane-graph regions.

The grid is fixed: 18 x 7 cells of 4 m, covering x in [-10, 62) and
y in [-12.5, 15.5) in the actor frame (x forward, y left). Cell (i, j) has
its center at (-8 + 4 i, -10.5 + 4 j). Masks answer hard membership queries
for reward evaluation; distance transforms provide smooth fields (with
bilinear interpolation and analytic gradients) for relaxed losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely
from shapely.ops import unary_union

from .errors import EmptyMask, UnknownFieldKind
from .geometry import Pose, points_to_polyline_distance
from .lane_graph import LaneGraph

CELL = 4.0
NX = 18
NY = 7
X_MIN = -10.0
Y_MIN = -12.5

# Cell-center coordinates along each axis.
XS = X_MIN + CELL * (np.arange(NX) + 0.5)
YS = Y_MIN + CELL * (np.arange(NY) + 0.5)

FIELD_KINDS = ("to_boundary", "to_centerline")


@dataclass(frozen=True, eq=False)
class RasterMask:
    """Boolean occupancy grid anchored at an actor pose."""

    pose: Pose
    cells: np.ndarray  # bool, (NX, NY)


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-cell distances (m) over the same grid as a RasterMask."""

    pose: Pose
    values: np.ndarray  # float, (NX, NY)
    kind: str


def cell_centers() -> np.ndarray:
    """All cell centers in the actor frame, shape (NX, NY, 2)."""
    gx, gy = np.meshgrid(XS, YS, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def rasterize(graph: LaneGraph, segment_ids, pose: Pose) -> RasterMask:
    """Mark cells whose center lies inside the union of segment polygons.

    ``segment_ids`` may be empty (all-false mask). Unknown ids raise
    UnknownSegment.
    """
    ids = sorted(set(segment_ids))
    if not ids:
        return RasterMask(pose=pose, cells=np.zeros((NX, NY), dtype=bool))
    union = unary_union([graph.seg_polygon(sid) for sid in ids])
    centers_world = pose.to_world(cell_centers().reshape(-1, 2))
    inside = shapely.contains_xy(union, centers_world[:, 0], centers_world[:, 1])
    return RasterMask(pose=pose, cells=inside.reshape(NX, NY))


def query(mask: RasterMask, points) -> np.ndarray:
    """Mask value at actor-frame point(s) (..., 2); False outside the window.

    Cells are half-open boxes, so a point on the shared edge of two cells
    belongs to the cell with the larger index.
    """
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    i = np.floor((pts[..., 0] - X_MIN) / CELL).astype(int)
    j = np.floor((pts[..., 1] - Y_MIN) / CELL).astype(int)
    ok = (i >= 0) & (i < NX) & (j >= 0) & (j < NY)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    out[ok] = mask.cells[i[ok], j[ok]]
    return out[0] if scalar else out


def distance_transform(
    mask: RasterMask, kind: str, centerlines: list[np.ndarray] | None = None
) -> DistanceField:
    """Distance field over the grid.

    kind="to_boundary": Euclidean distance from each cell center to the
    nearest true cell center (zero on true cells). Raises EmptyMask when the
    mask has no true cell.

    kind="to_centerline": distance from each cell center to the nearest of
    the given world-frame centerline polylines.
    """
    centers = cell_centers().reshape(-1, 2)
    if kind == "to_boundary":
        if not mask.cells.any():
            raise EmptyMask("to_boundary needs at least one true cell")
        true_pts = centers[mask.cells.reshape(-1)]
        diff = centers[:, None, :] - true_pts[None, :, :]
        values = np.linalg.norm(diff, axis=2).min(axis=1).reshape(NX, NY)
        values[mask.cells] = 0.0
    elif kind == "to_centerline":
        if not centerlines:
            raise EmptyMask("to_centerline needs at least one centerline")
        local = [mask.pose.to_local(np.asarray(cl, dtype=float)) for cl in centerlines]
        dists = np.stack(
            [points_to_polyline_distance(cl, centers) for cl in local], axis=0
        )
        values = dists.min(axis=0).reshape(NX, NY)
    else:
        raise UnknownFieldKind(f"unknown distance transform kind {kind!r}")
    return DistanceField(pose=mask.pose, values=values, kind=kind)


def sample_field(field: DistanceField, point) -> tuple[float, np.ndarray]:
    """Bilinear field value and gradient at an actor-frame point.

    Outside the lattice of cell centers the value clamps to the edge and the
    gradient component in the clamped direction is zero, keeping the sampled
    surface continuous everywhere.
    """
    p = np.asarray(point, dtype=float)
    u_raw = (p[0] - XS[0]) / CELL
    v_raw = (p[1] - YS[0]) / CELL
    u = float(np.clip(u_raw, 0.0, NX - 1))
    v = float(np.clip(v_raw, 0.0, NY - 1))
    i0 = min(int(u), NX - 2)
    j0 = min(int(v), NY - 2)
    fx = u - i0
    fy = v - j0
    z = field.values
    z00, z10 = z[i0, j0], z[i0 + 1, j0]
    z01, z11 = z[i0, j0 + 1], z[i0 + 1, j0 + 1]
    value = (
        z00 * (1 - fx) * (1 - fy)
        + z10 * fx * (1 - fy)
        + z01 * (1 - fx) * fy
        + z11 * fx * fy
    )
    gx = ((z10 - z00) * (1 - fy) + (z11 - z01) * fy) / CELL
    gy = ((z01 - z00) * (1 - fx) + (z11 - z10) * fx) / CELL
    if u_raw < 0.0 or u_raw > NX - 1:
        gx = 0.0
    if v_raw < 0.0 or v_raw > NY - 1:
        gy = 0.0
    return float(value), np.array([gx, gy])


def sample_field_batch(field: DistanceField, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sample_field over (..., 2) points; returns (values, grads)."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 2)
    u_raw = (flat[:, 0] - XS[0]) / CELL
    v_raw = (flat[:, 1] - YS[0]) / CELL
    u = np.clip(u_raw, 0.0, NX - 1)
    v = np.clip(v_raw, 0.0, NY - 1)
    i0 = np.minimum(u.astype(int), NX - 2)
    j0 = np.minimum(v.astype(int), NY - 2)
    fx = u - i0
    fy = v - j0
    z = field.values
    z00 = z[i0, j0]
    z10 = z[i0 + 1, j0]
    z01 = z[i0, j0 + 1]
    z11 = z[i0 + 1, j0 + 1]
    values = (
        z00 * (1 - fx) * (1 - fy)
        + z10 * fx * (1 - fy)
        + z01 * (1 - fx) * fy
        + z11 * fx * fy
    )
    gx = ((z10 - z00) * (1 - fy) + (z11 - z01) * fy) / CELL
    gy = ((z01 - z00) * (1 - fx) + (z11 - z10) * fx) / CELL
    gx = np.where((u_raw < 0.0) | (u_raw > NX - 1), 0.0, gx)
    gy = np.where((v_raw < 0.0) | (v_raw > NY - 1), 0.0, gy)
    grads = np.stack([gx, gy], axis=-1)
    return values.reshape(pts.shape[:-1]), grads.reshape(pts.shape)


def to_pgm(mask: RasterMask) -> str:
    """Plain-text PGM (P2) rendering; rows run from max y down to min y."""
    lines = ["P2", f"{NX} {NY}", "255"]
    for j in range(NY - 1, -1, -1):
        lines.append(" ".join("255" if mask.cells[i, j] else "0" for i in range(NX)))
    return "\n".join(lines) + "\n"


__all__ = [
    "CELL",
    "NX",
    "NY",
    "X_MIN",
    "Y_MIN",
    "XS",
    "YS",
    "FIELD_KINDS",
    "RasterMask",
    "DistanceField",
    "cell_centers",
    "rasterize",
    "query",
    "distance_transform",
    "sample_field",
    "sample_field_batch",
    "to_pgm",
]
