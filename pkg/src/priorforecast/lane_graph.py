"""Lane-segment graph: construction, legality pruning, reachability, routes.

A lane graph is a set of short lane segments (centerline polyline plus a
drivable polygon) connected by directed edges: ``successor``/``predecessor``
for longitudinal continuation and ``left_adjacent``/``right_adjacent`` for
lane changes. Traffic lights govern entry into specific segments.

Legality pruning removes lane-change edges across solid paint and
continuation edges into red-governed segments; reachability then walks the
pruned graph under an arc-length budget. Arc-length cost convention: a
successor edge u -> v costs the full centerline length of u (the distance
driven to leave u), while adjacency edges cost nothing. Seeds enter at cost
zero.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from shapely.geometry import Polygon

from .errors import (
    DanglingEdge,
    DegeneratePolyline,
    DuplicateId,
    InvalidLight,
    InvalidSegment,
    NoRoute,
    UnknownSeed,
    UnknownSegment,
)
from .geometry import OrientedBox, polyline_length


class BoundaryType(str, Enum):
    DASHED = "dashed"
    SOLID = "solid"
    DOUBLE_SOLID_YELLOW = "double_solid_yellow"


class EdgeKind(str, Enum):
    SUCCESSOR = "successor"
    PREDECESSOR = "predecessor"
    LEFT_ADJACENT = "left_adjacent"
    RIGHT_ADJACENT = "right_adjacent"


class LightState(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"


#: Boundary types that may not be crossed by a lane change.
UNCROSSABLE = frozenset({BoundaryType.SOLID, BoundaryType.DOUBLE_SOLID_YELLOW})

_RECIPROCAL = {
    EdgeKind.SUCCESSOR: EdgeKind.PREDECESSOR,
    EdgeKind.PREDECESSOR: EdgeKind.SUCCESSOR,
}


@dataclass(frozen=True, eq=False)
class LaneSegment:
    """One directed lane piece.

    centerline: (N, 2) world-frame polyline, driven first point to last.
    polygon: (M, 2) ring of the drivable surface (not closed explicitly).
    light_control: id of the traffic light governing entry, or None.
    """

    id: int
    centerline: np.ndarray
    polygon: np.ndarray
    left_boundary: BoundaryType = BoundaryType.DASHED
    right_boundary: BoundaryType = BoundaryType.DASHED
    light_control: int | None = None

    def length(self) -> float:
        return polyline_length(self.centerline)


@dataclass(frozen=True)
class LaneEdge:
    src: int
    dst: int
    kind: EdgeKind


@dataclass(frozen=True)
class TrafficLight:
    id: int
    state: LightState
    governed: frozenset[int]


@dataclass(eq=False)
class LaneGraph:
    """Validated lane graph with lookup tables precomputed once."""

    segments: dict[int, LaneSegment]
    edges: tuple[LaneEdge, ...]
    lights: dict[int, TrafficLight]
    # Derived lookups, filled by build_graph.
    out_edges: dict[int, tuple[LaneEdge, ...]] = field(default_factory=dict)
    _shapely: dict[int, Polygon] = field(default_factory=dict, repr=False)
    _lengths: dict[int, float] = field(default_factory=dict, repr=False)

    def segment(self, seg_id: int) -> LaneSegment:
        try:
            return self.segments[seg_id]
        except KeyError:
            raise UnknownSegment(f"segment {seg_id} not in graph") from None

    def seg_polygon(self, seg_id: int) -> Polygon:
        poly = self._shapely.get(seg_id)
        if poly is None:
            poly = Polygon(self.segment(seg_id).polygon)
            self._shapely[seg_id] = poly
        return poly

    def seg_length(self, seg_id: int) -> float:
        val = self._lengths.get(seg_id)
        if val is None:
            val = self.segment(seg_id).length()
            self._lengths[seg_id] = val
        return val

    def successors(self, seg_id: int) -> list[int]:
        return [e.dst for e in self.out_edges.get(seg_id, ()) if e.kind is EdgeKind.SUCCESSOR]

    def adjacents(self, seg_id: int) -> list[int]:
        return [
            e.dst
            for e in self.out_edges.get(seg_id, ())
            if e.kind in (EdgeKind.LEFT_ADJACENT, EdgeKind.RIGHT_ADJACENT)
        ]

    def red_governed(self) -> frozenset[int]:
        """Segments currently governed by a red light."""
        out: set[int] = set()
        for light in self.lights.values():
            if light.state is LightState.RED:
                out.update(light.governed)
        return frozenset(out)


def _validate_segment(seg: LaneSegment) -> None:
    cl = np.asarray(seg.centerline, dtype=float)
    if cl.ndim != 2 or cl.shape[0] < 2 or cl.shape[1] != 2:
        raise DegeneratePolyline(f"segment {seg.id}: centerline must be (N>=2, 2)")
    if not np.isfinite(cl).all():
        raise DegeneratePolyline(f"segment {seg.id}: non-finite centerline")
    steps = np.linalg.norm(np.diff(cl, axis=0), axis=1)
    if (steps <= 1e-9).any():
        raise DegeneratePolyline(f"segment {seg.id}: repeated consecutive points")
    ring = np.asarray(seg.polygon, dtype=float)
    if ring.ndim != 2 or ring.shape[0] < 3 or ring.shape[1] != 2:
        raise InvalidSegment(f"segment {seg.id}: polygon must be (M>=3, 2)")
    poly = Polygon(ring)
    if not poly.is_valid or poly.area <= 0.0:
        raise InvalidSegment(f"segment {seg.id}: polygon is not simple/positive-area")


def build_graph(
    segments: list[LaneSegment],
    edges: list[LaneEdge],
    lights: list[TrafficLight] | None = None,
) -> LaneGraph:
    """Assemble and validate a lane graph.

    Reciprocal successor/predecessor edges are added automatically; duplicate
    edges are dropped. Raises DuplicateId, DanglingEdge, DegeneratePolyline,
    InvalidSegment or InvalidLight on malformed input.
    """
    seg_map: dict[int, LaneSegment] = {}
    for seg in segments:
        if seg.id in seg_map:
            raise DuplicateId(f"duplicate segment id {seg.id}")
        _validate_segment(seg)
        seg_map[seg.id] = seg

    light_map: dict[int, TrafficLight] = {}
    for light in lights or []:
        if light.id in light_map:
            raise DuplicateId(f"duplicate light id {light.id}")
        for seg_id in light.governed:
            if seg_id not in seg_map:
                raise DanglingEdge(f"light {light.id} governs unknown segment {seg_id}")
            if seg_map[seg_id].light_control != light.id:
                raise InvalidLight(
                    f"segment {seg_id} does not reference light {light.id} back"
                )
        light_map[light.id] = light
    for seg in seg_map.values():
        if seg.light_control is not None:
            light = light_map.get(seg.light_control)
            if light is None or seg.id not in light.governed:
                raise InvalidLight(
                    f"segment {seg.id} references light {seg.light_control} "
                    "which does not govern it"
                )

    edge_set: set[LaneEdge] = set()
    for e in edges:
        if e.src not in seg_map or e.dst not in seg_map:
            raise DanglingEdge(f"edge {e.src}->{e.dst} references unknown segment")
        edge_set.add(e)
        rec = _RECIPROCAL.get(e.kind)
        if rec is not None:
            edge_set.add(LaneEdge(e.dst, e.src, rec))

    ordered = tuple(sorted(edge_set, key=lambda e: (e.src, e.dst, e.kind.value)))
    out_edges: dict[int, list[LaneEdge]] = {sid: [] for sid in seg_map}
    for e in ordered:
        out_edges[e.src].append(e)
    graph = LaneGraph(
        segments=seg_map,
        edges=ordered,
        lights=light_map,
        out_edges={k: tuple(v) for k, v in out_edges.items()},
    )
    return graph


def prune_illegal_edges(graph: LaneGraph, yellow_is_red: bool = False) -> LaneGraph:
    """Drop edges a rule-abiding driver may not take right now.

    Removes lane-change (adjacency) edges whose crossed boundary — the source
    segment's boundary on the side of the change — is solid or double solid
    yellow, and successor edges leading into any segment governed by a red
    light (yellow counts as red only when yellow_is_red is set).
    Predecessor edges mirror their successor twins.
    """
    blocked = {LightState.RED}
    if yellow_is_red:
        blocked.add(LightState.YELLOW)
    stop_segs: set[int] = set()
    for light in graph.lights.values():
        if light.state in blocked:
            stop_segs.update(light.governed)

    kept: list[LaneEdge] = []
    for e in graph.edges:
        if e.kind is EdgeKind.LEFT_ADJACENT:
            if graph.segments[e.src].left_boundary in UNCROSSABLE:
                continue
        elif e.kind is EdgeKind.RIGHT_ADJACENT:
            if graph.segments[e.src].right_boundary in UNCROSSABLE:
                continue
        elif e.kind is EdgeKind.SUCCESSOR:
            if e.dst in stop_segs:
                continue
        elif e.kind is EdgeKind.PREDECESSOR:
            if e.src in stop_segs:
                continue
        kept.append(e)

    out_edges: dict[int, list[LaneEdge]] = {sid: [] for sid in graph.segments}
    for e in kept:
        out_edges[e.src].append(e)
    return LaneGraph(
        segments=graph.segments,
        edges=tuple(kept),
        lights=graph.lights,
        out_edges={k: tuple(v) for k, v in out_edges.items()},
    )


def associate_lanes(graph: LaneGraph, box: OrientedBox) -> list[int]:
    """Ids of segments whose polygon intersects the oriented box, sorted."""
    footprint = Polygon(box.corners())
    hits = [
        sid for sid in graph.segments if graph.seg_polygon(sid).intersects(footprint)
    ]
    return sorted(hits)


def _min_entry_costs(graph: LaneGraph, seeds: set[int]) -> dict[int, float]:
    """Cheapest arc-length cost to enter each segment from the seed set.

    Dijkstra over successor (cost = source centerline length) and adjacency
    (cost 0) edges. Seeds start at cost zero.
    """
    dist: dict[int, float] = {s: 0.0 for s in seeds}
    heap: list[tuple[float, int]] = [(0.0, s) for s in sorted(seeds)]
    heapq.heapify(heap)
    while heap:
        cost, sid = heapq.heappop(heap)
        if cost > dist.get(sid, float("inf")):
            continue
        for e in graph.out_edges.get(sid, ()):
            if e.kind is EdgeKind.SUCCESSOR:
                step = graph.seg_length(sid)
            elif e.kind in (EdgeKind.LEFT_ADJACENT, EdgeKind.RIGHT_ADJACENT):
                step = 0.0
            else:
                continue
            nxt = cost + step
            if nxt < dist.get(e.dst, float("inf")):
                dist[e.dst] = nxt
                heapq.heappush(heap, (nxt, e.dst))
    return dist


def reachable_lanes(
    graph: LaneGraph, seeds: set[int] | list[int], max_arc_length: float = 120.0
) -> set[int]:
    """Segments legally reachable from the seeds within an arc-length budget.

    ``graph`` should already be pruned; this walks successor and adjacency
    edges as given. Seeds are always included.
    """
    seed_set = set(seeds)
    for s in seed_set:
        if s not in graph.segments:
            raise UnknownSeed(f"seed segment {s} not in graph")
    if not seed_set:
        return set()
    dist = _min_entry_costs(graph, seed_set)
    return {sid for sid, d in dist.items() if d <= max_arc_length}


def _can_reach(graph: LaneGraph, goal: int) -> set[int]:
    """Segments from which the goal is reachable via successor/adjacency."""
    rev: dict[int, set[int]] = {sid: set() for sid in graph.segments}
    for e in graph.edges:
        if e.kind in (EdgeKind.SUCCESSOR, EdgeKind.LEFT_ADJACENT, EdgeKind.RIGHT_ADJACENT):
            rev[e.dst].add(e.src)
    seen = {goal}
    stack = [goal]
    while stack:
        sid = stack.pop()
        for prev in rev[sid]:
            if prev not in seen:
                seen.add(prev)
                stack.append(prev)
    return seen


def compute_route(
    graph: LaneGraph,
    sdv_segment: int,
    goal_segment: int,
    horizon_distance: float,
    yellow_is_red: bool = False,
) -> set[int]:
    """Segments on legal paths from the SDV toward its goal within a horizon.

    The graph is pruned internally. A segment belongs to the route when it is
    enterable from the SDV segment within ``horizon_distance`` of driven arc
    length and the goal remains reachable from it. Raises NoRoute when
    pruning leaves no path from SDV to goal at any distance, and
    UnknownSegment for bad ids.
    """
    graph.segment(sdv_segment)
    graph.segment(goal_segment)
    pruned = prune_illegal_edges(graph, yellow_is_red=yellow_is_red)
    dist = _min_entry_costs(pruned, {sdv_segment})
    if goal_segment not in dist:
        raise NoRoute(
            f"no legal path from segment {sdv_segment} to goal {goal_segment}"
        )
    onward = _can_reach(pruned, goal_segment)
    return {
        sid
        for sid, d in dist.items()
        if d <= horizon_distance and sid in onward
    }


# --- serialization ---------------------------------------------------------

def graph_payload(graph: LaneGraph) -> dict:
    """JSON-ready dict with deterministic ordering (sorted ids)."""
    return {
        "segments": [
            {
                "id": seg.id,
                "centerline": np.asarray(seg.centerline, dtype=float).tolist(),
                "polygon": np.asarray(seg.polygon, dtype=float).tolist(),
                "left_boundary": seg.left_boundary.value,
                "right_boundary": seg.right_boundary.value,
                "light_control": seg.light_control,
            }
            for _, seg in sorted(graph.segments.items())
        ],
        "edges": [
            {"src": e.src, "dst": e.dst, "kind": e.kind.value} for e in graph.edges
        ],
        "lights": [
            {
                "id": light.id,
                "state": light.state.value,
                "governed": sorted(light.governed),
            }
            for _, light in sorted(graph.lights.items())
        ],
    }


def graph_to_json(graph: LaneGraph) -> str:
    """Serialize deterministically (sorted ids, fixed key order)."""
    return json.dumps(graph_payload(graph), sort_keys=True, separators=(",", ":"))


def graph_from_payload(payload: dict) -> LaneGraph:
    segments = [
        LaneSegment(
            id=int(s["id"]),
            centerline=np.asarray(s["centerline"], dtype=float),
            polygon=np.asarray(s["polygon"], dtype=float),
            left_boundary=BoundaryType(s["left_boundary"]),
            right_boundary=BoundaryType(s["right_boundary"]),
            light_control=None if s["light_control"] is None else int(s["light_control"]),
        )
        for s in payload["segments"]
    ]
    edges = [
        LaneEdge(int(e["src"]), int(e["dst"]), EdgeKind(e["kind"]))
        for e in payload["edges"]
    ]
    lights = [
        TrafficLight(
            id=int(l["id"]),
            state=LightState(l["state"]),
            governed=frozenset(int(g) for g in l["governed"]),
        )
        for l in payload["lights"]
    ]
    return build_graph(segments, edges, lights)


def graph_from_json(text: str) -> LaneGraph:
    return graph_from_payload(json.loads(text))


__all__ = [
    "BoundaryType",
    "EdgeKind",
    "LightState",
    "LaneSegment",
    "LaneEdge",
    "TrafficLight",
    "LaneGraph",
    "UNCROSSABLE",
    "build_graph",
    "prune_illegal_edges",
    "associate_lanes",
    "reachable_lanes",
    "compute_route",
    "graph_payload",
    "graph_from_payload",
    "graph_to_json",
    "graph_from_json",
]
