"""Lattice planner evaluation: do better forecasts make a safer plan?

The planner is deliberately simple and fixed: candidates follow route
centerlines under constant-acceleration speed profiles, and each is scored
against every forecast sample with equal weight. What is measured is the
difference between forecasters, not planner quality.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoRoute, SampleCountMismatch
from .forecaster import Architecture, default_architecture, forward, sample_waypoint_array
from .geometry import PathCache, boxes_overlap_batch
from .lane_graph import LaneGraph, prune_illegal_edges
from .priors import prepare_scene, sdv_route
from .scene_gen import N_FUTURE, Scene

SDV_LENGTH = 5.0
SDV_WIDTH = 2.0
ACCEL_PROFILES = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0)
V_MAX = 20.0
PLAN_DT = 0.5
BLEND_STEPS = 4  # waypoints over which a lane-change candidate merges


@dataclass(frozen=True)
class CostWeights:
    collision: float = 1000.0
    jerk: float = 1.0
    lat_accel: float = 1.0
    progress: float = 0.1


@dataclass
class PlanCandidate:
    """11 poses (x, y, heading) at 0.5 s spacing plus its generator label."""

    poses: np.ndarray  # (11, 3)
    lane_id: int
    accel: float


@dataclass
class ActorForecast:
    """Equally weighted trajectory samples for one actor, world frame."""

    samples: np.ndarray  # (S, 11, 2)
    length: float
    width: float


@dataclass
class PlanningReport:
    collision_rate: float  # % of scenes with any plan/GT overlap within 5 s
    l2_human: float  # m, plan endpoint vs logged SDV endpoint
    lat_accel: float  # m/s^2
    jerk: float  # m/s^3
    progress: float  # m
    n_scenes: int


# --- candidate generation -----------------------------------------------------

def _straightest(graph: LaneGraph, from_id: int, pool):
    """Successor with the least heading change at the junction."""
    ref = graph.segment(from_id).centerline
    h0 = np.arctan2(*(ref[-1] - ref[-2])[::-1])
    best, best_turn = None, np.inf
    for sid in sorted(pool):
        cl = graph.segment(sid).centerline
        h1 = np.arctan2(*(cl[1] - cl[0])[::-1])
        turn = abs((h1 - h0 + np.pi) % (2.0 * np.pi) - np.pi)
        if turn < best_turn - 1e-12:
            best, best_turn = sid, turn
    return best


def _route_chain(graph: LaneGraph, route, start: int, needed: float) -> np.ndarray:
    """Concatenate centerlines from start, preferring in-route successors."""
    pts = [np.asarray(graph.segment(start).centerline, dtype=float)]
    total = graph.seg_length(start)
    cur = start
    while total < needed:
        succ = graph.successors(cur)
        pool = [s for s in succ if s in route] or list(succ)
        if not pool:
            break
        nxt = _straightest(graph, cur, pool)
        cl = np.asarray(graph.segment(nxt).centerline, dtype=float)
        if np.allclose(cl[0], pts[-1][-1]):
            cl = cl[1:]
        pts.append(cl)
        total += graph.seg_length(nxt)
        cur = nxt
    return np.vstack(pts)


def _profile_arclengths(v0: float, accel: float):
    """Distance traveled at each plan timestep under a clamped-speed profile."""
    ts = np.arange(N_FUTURE) * PLAN_DT
    if accel > 0.0:
        t_hit = max(0.0, (V_MAX - v0) / accel) if v0 < V_MAX else 0.0
        tc = np.minimum(ts, t_hit)
        s = v0 * tc + 0.5 * accel * tc**2 + V_MAX * np.maximum(0.0, ts - t_hit)
    elif accel < 0.0:
        t_hit = v0 / -accel if v0 > 0.0 else 0.0
        tc = np.minimum(ts, t_hit)
        s = v0 * tc + 0.5 * accel * tc**2
    else:
        s = v0 * ts
    return s


def generate_candidates(sdv_state, route, graph: LaneGraph) -> list:
    """Lattice of route lanes x constant-acceleration speed profiles.

    Lanes are the SDV's current segment plus legal adjacent segments that
    belong to the route; paths follow centerlines (a short lateral blend
    joins the SDV's actual position to the chosen lane). Speeds clamp to
    [0, 20] m/s.
    """
    if not route:
        raise NoRoute("empty route")
    pruned = prune_illegal_edges(graph)
    pos = np.array([sdv_state.box.cx, sdv_state.box.cy])
    cur = _closest_route_segment(graph, route, pos)
    lanes = [cur] + [s for s in pruned.adjacents(cur) if s in route]
    v0 = float(sdv_state.speed)
    candidates = []
    for lane in lanes:
        chain = _route_chain(graph, route, lane, needed=v0 * 5.0 + 45.0)
        path = PathCache(chain)
        s0, _ = path.project(pos)
        p0, _ = path.point_at(s0)
        offset = pos - p0
        arcs = {a: _profile_arclengths(v0, a) for a in ACCEL_PROFILES}
        for a in ACCEL_PROFILES:
            poses = np.empty((N_FUTURE, 3))
            for t, s in enumerate(arcs[a]):
                pt, heading = path.point_at(s0 + s)
                fade = max(0.0, 1.0 - t / BLEND_STEPS)
                poses[t, :2] = pt + fade * offset
                poses[t, 2] = heading
            candidates.append(PlanCandidate(poses=poses, lane_id=lane, accel=a))
    return candidates


def _closest_route_segment(graph: LaneGraph, route, pos: np.ndarray) -> int:
    from .geometry import project_to_polyline

    best, best_d = None, np.inf
    for sid in sorted(route):
        _, d = project_to_polyline(graph.segment(sid).centerline, pos)
        if d < best_d - 1e-12:
            best, best_d = sid, d
    return best


# --- cost ----------------------------------------------------------------------

def _corners_stack(centers: np.ndarray, headings: np.ndarray,
                   length: float, width: float) -> np.ndarray:
    """Oriented-box corners (..., 4, 2) for stacked centers/headings."""
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = np.cos(headings), np.sin(headings)
    x = c[..., None] * local[:, 0] - s[..., None] * local[:, 1]
    y = s[..., None] * local[:, 0] + c[..., None] * local[:, 1]
    return np.asarray(centers)[..., None, :] + np.stack([x, y], axis=-1)


def headings_by_differences(points: np.ndarray) -> np.ndarray:
    """Per-waypoint headings from central differences; (..., T, 2) -> (..., T).

    Waypoints that do not move keep the previous step's heading.
    """
    pts = np.asarray(points, dtype=float)
    d = np.empty_like(pts)
    d[..., 1:-1, :] = pts[..., 2:, :] - pts[..., :-2, :]
    d[..., 0, :] = pts[..., 1, :] - pts[..., 0, :]
    d[..., -1, :] = pts[..., -1, :] - pts[..., -2, :]
    h = np.arctan2(d[..., 1], d[..., 0])
    still = np.linalg.norm(d, axis=-1) < 1e-6
    for t in range(1, h.shape[-1]):
        h[..., t] = np.where(still[..., t], h[..., t - 1], h[..., t])
    return h


def _comfort_terms(poses: np.ndarray):
    """(mean |jerk|, mean |lateral accel|, progress) for an (11, 3) plan."""
    p = poses[:, :2]
    vel = np.diff(p, axis=0) / PLAN_DT  # (10, 2)
    acc = np.diff(vel, axis=0) / PLAN_DT  # (9, 2)
    jerk = np.diff(acc, axis=0) / PLAN_DT  # (8, 2)
    mean_jerk = float(np.linalg.norm(jerk, axis=1).mean())
    # Lateral component of acceleration relative to the pose heading at the
    # center of each second-difference stencil.
    h = poses[1:-1, 2]
    lat = np.abs(np.cos(h) * acc[:, 1] - np.sin(h) * acc[:, 0])
    mean_lat = float(lat.mean())
    progress = float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
    return mean_jerk, mean_lat, progress


def collision_fraction(candidate: PlanCandidate, forecasts) -> float:
    """Fraction of all actors' samples overlapping the plan at any timestep."""
    if not forecasts:
        return 0.0
    counts = {f.samples.shape[0] for f in forecasts}
    if len(counts) != 1:
        raise SampleCountMismatch(f"per-actor sample counts differ: {sorted(counts)}")
    sdv_corners = _corners_stack(
        candidate.poses[:, :2], candidate.poses[:, 2], SDV_LENGTH, SDV_WIDTH
    )  # (T, 4, 2)
    hits = 0
    total = 0
    for f in forecasts:
        h = headings_by_differences(f.samples)  # (S, T)
        corners = _corners_stack(f.samples, h, f.length, f.width)  # (S, T, 4, 2)
        overlap = boxes_overlap_batch(sdv_corners[None], corners)  # (S, T)
        hits += int(overlap.any(axis=1).sum())
        total += f.samples.shape[0]
    return hits / total


def plan_cost(candidate: PlanCandidate, forecasts,
              weights: CostWeights = CostWeights()) -> float:
    """Weighted sum: collision dominates, comfort penalized, progress paid."""
    mean_jerk, mean_lat, progress = _comfort_terms(candidate.poses)
    col = collision_fraction(candidate, forecasts)
    return (weights.collision * col + weights.jerk * mean_jerk
            + weights.lat_accel * mean_lat - weights.progress * progress)


def select_plan(candidates, forecasts,
                weights: CostWeights = CostWeights()) -> PlanCandidate:
    """Lowest-cost candidate; ties resolved by lowest index."""
    costs = [plan_cost(c, forecasts, weights) for c in candidates]
    return candidates[int(np.argmin(costs))]


# --- scene metrics --------------------------------------------------------------

@dataclass
class ScenePlanMetrics:
    collision: bool
    l2_human: float
    lat_accel: float
    jerk: float
    progress: float


def planning_metrics(plan: PlanCandidate, scene: Scene) -> ScenePlanMetrics:
    """Open-loop score of one plan against the scene's ground truth."""
    mean_jerk, mean_lat, progress = _comfort_terms(plan.poses)
    sdv_corners = _corners_stack(
        plan.poses[:, :2], plan.poses[:, 2], SDV_LENGTH, SDV_WIDTH
    )
    collision = False
    for actor in scene.actors:
        gt = np.asarray(actor.future_gt, dtype=float)
        h = headings_by_differences(gt[None])[0]
        corners = _corners_stack(gt, h, actor.box.length, actor.box.width)
        if bool(boxes_overlap_batch(sdv_corners, corners).any()):
            collision = True
            break
    sdv_end = np.asarray(scene.sdv.future_gt, dtype=float)[-1]
    l2 = float(np.linalg.norm(plan.poses[-1, :2] - sdv_end))
    return ScenePlanMetrics(collision=collision, l2_human=l2,
                            lat_accel=mean_lat, jerk=mean_jerk, progress=progress)


def aggregate_planning(per_scene) -> PlanningReport:
    n = len(per_scene)
    return PlanningReport(
        collision_rate=float(100.0 * np.mean([m.collision for m in per_scene])),
        l2_human=float(np.mean([m.l2_human for m in per_scene])),
        lat_accel=float(np.mean([m.lat_accel for m in per_scene])),
        jerk=float(np.mean([m.jerk for m in per_scene])),
        progress=float(np.mean([m.progress for m in per_scene])),
        n_scenes=n,
    )


def forecasts_for_scene(params, scene: Scene, n_samples: int = 50,
                        seed: int = 0, arch: Architecture | None = None,
                        sampler: str = "smooth"):
    """Sampled world-frame forecasts for every non-SDV actor in the scene."""
    arch = arch or default_architecture()
    out = []
    for pa in prepare_scene(scene, mode="reinforce"):
        dist = forward(params, pa.features, arch)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, pa.scene_seed, pa.actor_id, 7))
        )
        ys, _, _ = sample_waypoint_array(dist, n_samples, rng,
                                         smooth=(sampler == "smooth"))
        world = pa.pose.to_world(ys.reshape(-1, 2)).reshape(ys.shape)
        actor = next(a for a in scene.actors if a.id == pa.actor_id)
        out.append(ActorForecast(samples=world, length=actor.box.length,
                                 width=actor.box.width))
    return out


def gt_forecasts(scene: Scene, n_samples: int = 50):
    """Ground-truth futures replicated as degenerate forecast samples."""
    return [
        ActorForecast(
            samples=np.repeat(np.asarray(a.future_gt, dtype=float)[None],
                              n_samples, axis=0),
            length=a.box.length, width=a.box.width,
        )
        for a in scene.actors
    ]


def plan_scene(params, scene: Scene, n_samples: int = 50, seed: int = 0,
               arch: Architecture | None = None,
               weights: CostWeights = CostWeights(),
               forecasts=None) -> ScenePlanMetrics:
    """Forecast, plan, and score one scene end to end."""
    route = sdv_route(scene)
    candidates = generate_candidates(scene.sdv, route, scene.graph)
    if forecasts is None:
        forecasts = forecasts_for_scene(params, scene, n_samples, seed, arch)
    plan = select_plan(candidates, forecasts, weights)
    return planning_metrics(plan, scene)


def evaluate_planner(params, scenes, n_samples: int = 50, seed: int = 0,
                     arch: Architecture | None = None,
                     weights: CostWeights = CostWeights(),
                     workers: int = 1) -> PlanningReport:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(
                lambda s: plan_scene(params, s, n_samples, seed, arch, weights),
                scenes,
            ))
    else:
        per_scene = [plan_scene(params, s, n_samples, seed, arch, weights)
                     for s in scenes]
    return aggregate_planning(per_scene)


PLANNING_CSV_HEADER = "model,collision_pct,l2_human_m,lat_accel_ms2,jerk_ms3,progress_m"


def planning_csv(rows) -> str:
    """rows: iterable of (model name, PlanningReport); stable byte output."""
    lines = [PLANNING_CSV_HEADER]
    for name, r in rows:
        lines.append(",".join([
            name, repr(r.collision_rate), repr(r.l2_human),
            repr(r.lat_accel), repr(r.jerk), repr(r.progress),
        ]))
    return "\n".join(lines) + "\n"


__all__ = [
    "SDV_LENGTH",
    "SDV_WIDTH",
    "ACCEL_PROFILES",
    "V_MAX",
    "CostWeights",
    "PlanCandidate",
    "ActorForecast",
    "PlanningReport",
    "ScenePlanMetrics",
    "generate_candidates",
    "headings_by_differences",
    "collision_fraction",
    "plan_cost",
    "select_plan",
    "planning_metrics",
    "aggregate_planning",
    "forecasts_for_scene",
    "gt_forecasts",
    "plan_scene",
    "evaluate_planner",
    "planning_csv",
    "PLANNING_CSV_HEADER",
]
