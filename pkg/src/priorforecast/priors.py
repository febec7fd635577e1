"""Prior-knowledge rewards and the losses that inject them into training.

Two rewards score sampled waypoints against binary masks in the actor
frame: a reachable-lanes reward (+-r_d, gated off whenever the ground-truth
waypoint itself leaves the reachable set, so rule-breaking actors are never
penalized) and an SDV-route reward with the four true/false
positive/negative cases. Because mask lookups are piecewise constant, the
training signal flows through a score-function (REINFORCE) estimator:

    grad L_prior ~= (1/S) sum_i -grad log p(y^i | x) * r(y^i, x)

with either whole-trajectory or per-waypoint attribution. Two
differentiable relaxations of the reach reward (distance-to-centerline and
distance-to-boundary fields, applied at the means or through
reparameterized samples) are provided for ablation.

The composite training loss per actor is beta * L_symmetric +
gamma * L_prior, where L_symmetric is the closest-mode negative
log-likelihood plus mode cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidConfig, InvalidReward, NoRoute, NonFiniteGradient
from .forecaster import (
    Architecture,
    DistGrad,
    TrajectoryDistribution,
    backprop,
    default_architecture,
    extract_features,
    forward_with_cache,
    gaussian_log_and_grads,
    sample_waypoint_array,
)
from .geometry import Pose, project_to_polyline
from .lane_graph import (
    LaneGraph,
    associate_lanes,
    compute_route,
    prune_illegal_edges,
    reachable_lanes,
)
from .raster import (
    DistanceField,
    RasterMask,
    distance_transform,
    query,
    rasterize,
    sample_field_batch,
)
from .scene_gen import Scene

LOSS_MODES = (
    "mle_only",
    "reinforce",
    "relaxed_centerline_mean",
    "relaxed_boundary_mean",
    "relaxed_centerline_reparam",
    "relaxed_boundary_reparam",
)

REACH_BUDGET = 120.0
ROUTE_HORIZON_FLOOR = 40.0


@dataclass(frozen=True)
class RewardConfig:
    """Reward magnitudes; signs follow the precision/recall reading."""

    r_d: float = 1.0
    r_tp: float = 1.0
    r_fp: float = -1.0
    r_tn: float = 0.1
    r_fn: float = -1.0

    def __post_init__(self):
        vals = (self.r_d, self.r_tp, self.r_fp, self.r_tn, self.r_fn)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidReward("reward values must be finite")
        if self.r_d <= 0.0:
            raise InvalidReward("r_d must be positive")
        if not (self.r_tp > self.r_tn >= 0.0):
            raise InvalidReward("need r_tp > r_tn >= 0")
        if self.r_fp >= 0.0 or self.r_fn >= 0.0:
            raise InvalidReward("false positive/negative rewards must be negative")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        if self.beta < 0.0 or self.gamma < 0.0:
            raise InvalidConfig("loss weights must be non-negative")


@dataclass(frozen=True)
class EstimatorConfig:
    """Sample budget and variance-control options for the estimator."""

    samples: int = 16
    attribution: str = "waypoint"
    baseline: str = "none"

    def __post_init__(self):
        if self.samples < 1:
            raise InvalidConfig("estimator needs samples >= 1")
        if self.attribution not in ("trajectory", "waypoint"):
            raise InvalidConfig(f"unknown attribution {self.attribution!r}")
        if self.baseline not in ("none", "mean_reward"):
            raise InvalidConfig(f"unknown baseline {self.baseline!r}")


# --- rewards ----------------------------------------------------------------

def reach_reward(point, gt_point, reach_mask: RasterMask, cfg: RewardConfig) -> float:
    """+-r_d against the reachable mask, zero when the GT point is outside."""
    if not bool(query(reach_mask, gt_point)):
        return 0.0
    return cfg.r_d if bool(query(reach_mask, point)) else -cfg.r_d


def route_reward(point, gt_point, route_mask: RasterMask, cfg: RewardConfig) -> float:
    """Confusion-matrix reward of the sample against the SDV route mask."""
    in_route = bool(query(route_mask, point))
    gt_route = bool(query(route_mask, gt_point))
    if gt_route:
        return cfg.r_tp if in_route else cfg.r_fn
    return cfg.r_fp if in_route else cfg.r_tn


def batch_rewards(
    ys: np.ndarray,  # (S, T, 2) actor-frame sampled waypoints
    gt: np.ndarray,  # (T, 2)
    reach_mask: RasterMask,
    route_mask: RasterMask,
    cfg: RewardConfig,
):
    """Vectorized per-sample rewards; returns (totals (S,), per_t (S, T))."""
    in_reach = query(reach_mask, ys)
    gt_reach = query(reach_mask, gt)
    in_route = query(route_mask, ys)
    gt_route = query(route_mask, gt)
    reach_r = np.where(
        gt_reach[None, :], np.where(in_reach, cfg.r_d, -cfg.r_d), 0.0
    )
    route_r = np.where(
        gt_route[None, :],
        np.where(in_route, cfg.r_tp, cfg.r_fn),
        np.where(in_route, cfg.r_fp, cfg.r_tn),
    )
    per_t = reach_r + route_r
    return per_t.sum(axis=1), per_t


def trajectory_reward(sample, gt, reach_mask, route_mask, cfg: RewardConfig):
    """Total and per-waypoint reward for one sampled trajectory."""
    totals, per_t = batch_rewards(
        np.asarray(sample, dtype=float)[None], np.asarray(gt, dtype=float),
        reach_mask, route_mask, cfg,
    )
    return float(totals[0]), per_t[0]


# --- score-function estimator -------------------------------------------------

def score_function_dist_grad(
    dist: TrajectoryDistribution,
    ys: np.ndarray,  # (S, T, 2) samples drawn from dist
    totals: np.ndarray,  # (S,) per-sample rewards
    per_t: np.ndarray,  # (S, T) per-waypoint rewards
    attribution: str = "waypoint",
    baseline: str = "none",
):
    """Monte Carlo loss -(1/S) sum r and its score-function DistGrad.

    trajectory attribution weights the whole-trajectory log-likelihood
    gradient by the total reward; waypoint attribution weights each
    waypoint's marginal log-likelihood gradient by that waypoint's reward.
    The optional baseline subtracts the batch mean reward before weighting
    (it changes variance, not the estimator's mean).
    """
    n = ys.shape[0]
    loss = -float(totals.mean())
    logn, d_mu_g, d_sigma_g, d_rho_g = gaussian_log_and_grads(dist, ys)
    if attribution == "trajectory":
        base = totals.mean() if baseline == "mean_reward" else 0.0
        c = -(totals - base) / n  # (S,)
        mode_logp = dist.log_probs[None, :] + logn.sum(axis=2)  # (S, K)
        m = mode_logp.max(axis=1, keepdims=True)
        resp = np.exp(mode_logp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        cr = c[:, None] * resp  # (S, K)
        d_logits = cr.sum(axis=0) - c.sum() * dist.probs
        d_mu = np.einsum("sk,sktd->ktd", cr, d_mu_g)
        d_sigma = np.einsum("sk,sktd->ktd", cr, d_sigma_g)
        d_rho = np.einsum("sk,skt->kt", cr, d_rho_g)
    else:
        base = per_t.mean(axis=0) if baseline == "mean_reward" else 0.0
        c = -(per_t - base) / n  # (S, T)
        wp_logp = dist.log_probs[None, :, None] + logn  # (S, K, T)
        m = wp_logp.max(axis=1, keepdims=True)
        resp = np.exp(wp_logp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        cr = c[:, None, :] * resp  # (S, K, T)
        d_logits = np.einsum("skt->k", cr) - c.sum() * dist.probs
        d_mu = np.einsum("skt,sktd->ktd", cr, d_mu_g)
        d_sigma = np.einsum("skt,sktd->ktd", cr, d_sigma_g)
        d_rho = (cr * d_rho_g).sum(axis=0)
    return loss, DistGrad(d_logits=d_logits, d_mu=d_mu, d_sigma=d_sigma, d_rho=d_rho)


def _context_vector(context) -> np.ndarray:
    if hasattr(context, "to_vector"):
        return context.to_vector()
    return np.asarray(context, dtype=float)


def reinforce_grad(
    params: np.ndarray,
    context,
    gt: np.ndarray,
    reach_mask: RasterMask,
    route_mask: RasterMask,
    est_cfg: EstimatorConfig,
    reward_cfg: RewardConfig,
    rng: np.random.Generator,
    arch: Architecture | None = None,
):
    """Score-function gradient of the prior loss for one actor.

    Draws est_cfg.samples trajectories with independent per-waypoint noise,
    scores them against the masks, and pulls the DistGrad back through the
    network. Returns (loss estimate, flat parameter gradient).

    Actors whose GT endpoint lies outside reach_mask are non-compliant:
    the prior is gated off for them and the result is exactly (0, 0).
    """
    arch = arch or default_architecture()
    gt = np.asarray(gt, dtype=float)
    if not bool(query(reach_mask, gt[-1])):
        return 0.0, np.zeros(arch.param_count)
    dist, cache = forward_with_cache(params, _context_vector(context), arch)
    ys, _, _ = sample_waypoint_array(dist, est_cfg.samples, rng, smooth=False)
    totals, per_t = batch_rewards(ys, gt, reach_mask, route_mask, reward_cfg)
    loss, dgrad = score_function_dist_grad(
        dist, ys, totals, per_t, est_cfg.attribution, est_cfg.baseline
    )
    flat = backprop(params, cache, dgrad)
    if not np.isfinite(flat).all():
        raise NonFiniteGradient("REINFORCE gradient has NaN/inf")
    return loss, flat


# --- symmetric (closest-mode) loss -------------------------------------------

def closest_mode(dist: TrajectoryDistribution, gt: np.ndarray) -> int:
    """Mode whose mean sequence is nearest to gt (sum of waypoint norms)."""
    gt = np.asarray(gt, dtype=float)
    d = np.linalg.norm(dist.mu - gt[None, :, :], axis=2).sum(axis=1)
    return int(np.argmin(d))


def symmetric_loss_dist_grad(dist: TrajectoryDistribution, gt: np.ndarray):
    """Closest-mode NLL + mode cross-entropy, with its DistGrad.

    The mode choice k-hat is pinned (no gradient through the argmin).
    """
    gt = np.asarray(gt, dtype=float)
    k_hat = closest_mode(dist, gt)
    logn, d_mu_g, d_sigma_g, d_rho_g = gaussian_log_and_grads(dist, gt[None])
    loss = -(float(dist.log_probs[k_hat]) + float(logn[0, k_hat].sum()))
    g = DistGrad.zeros(dist.n_modes, dist.n_waypoints)
    g.d_logits = dist.probs.copy()
    g.d_logits[k_hat] -= 1.0
    g.d_mu[k_hat] = -d_mu_g[0, k_hat]
    g.d_sigma[k_hat] = -d_sigma_g[0, k_hat]
    g.d_rho[k_hat] = -d_rho_g[0, k_hat]
    return loss, g


def symmetric_loss(dist: TrajectoryDistribution, gt: np.ndarray) -> float:
    loss, _ = symmetric_loss_dist_grad(dist, gt)
    return loss


def symmetric_loss_grad(
    params: np.ndarray, context, gt: np.ndarray, arch: Architecture | None = None
):
    """(loss, flat parameter gradient) of the symmetric loss for one actor."""
    arch = arch or default_architecture()
    dist, cache = forward_with_cache(params, _context_vector(context), arch)
    loss, dgrad = symmetric_loss_dist_grad(dist, np.asarray(gt, dtype=float))
    flat = backprop(params, cache, dgrad)
    if not np.isfinite(flat).all():
        raise NonFiniteGradient("symmetric loss gradient has NaN/inf")
    return loss, flat


# --- relaxed (differentiable) ablations ----------------------------------------

def relaxed_mean_dist_grad(dist: TrajectoryDistribution, field: DistanceField):
    """Expected field value at the mode means, weighted by mode probability."""
    vals, grads = sample_field_batch(field, dist.mu)  # (K, T), (K, T, 2)
    per_mode = vals.sum(axis=1)  # (K,)
    loss = float(dist.probs @ per_mode)
    g = DistGrad.zeros(dist.n_modes, dist.n_waypoints)
    g.d_logits = dist.probs * (per_mode - loss)
    g.d_mu = dist.probs[:, None, None] * grads
    return loss, g


def relaxed_samples_dist_grad_from_noise(
    dist: TrajectoryDistribution,
    field: DistanceField,
    modes: np.ndarray,  # (S,)
    eps: np.ndarray,  # (S, T, 2) standard normal
):
    """Reparameterized-samples relaxation with the noise given explicitly.

    Gradients flow through the Gaussian path (mu, sigma, rho via the
    Cholesky map); the categorical mode draw is treated as a constant.
    """
    mu = dist.mu[modes]
    sx = dist.sigma[modes, :, 0]
    sy = dist.sigma[modes, :, 1]
    rho = dist.rho[modes]
    root = np.sqrt(1.0 - rho**2)
    ex, ey = eps[..., 0], eps[..., 1]
    ys = np.empty_like(mu)
    ys[..., 0] = mu[..., 0] + sx * ex
    ys[..., 1] = mu[..., 1] + sy * (rho * ex + root * ey)
    vals, grads = sample_field_batch(field, ys)  # (S, T), (S, T, 2)
    n = ys.shape[0]
    loss = float(vals.sum(axis=1).mean())
    gx, gy = grads[..., 0] / n, grads[..., 1] / n
    g = DistGrad.zeros(dist.n_modes, dist.n_waypoints)
    np.add.at(g.d_mu[..., 0], modes, gx)
    np.add.at(g.d_mu[..., 1], modes, gy)
    np.add.at(g.d_sigma[..., 0], modes, gx * ex)
    np.add.at(g.d_sigma[..., 1], modes, gy * (rho * ex + root * ey))
    np.add.at(g.d_rho, modes, gy * sy * (ex - rho / root * ey))
    return loss, g


def relaxed_loss(
    params: np.ndarray,
    context,
    gt: np.ndarray,
    field: DistanceField,
    target: str,
    est_cfg: EstimatorConfig,
    rng: np.random.Generator,
    reach_mask: RasterMask | None = None,
    arch: Architecture | None = None,
):
    """Differentiable stand-in for the reach reward; target "mean"/"samples".

    Mirrors the reach gating: when reach_mask is supplied and the GT
    endpoint lies outside it, the loss and gradient are exactly zero.
    """
    if target not in ("mean", "samples"):
        raise InvalidConfig(f"unknown relaxed target {target!r}")
    arch = arch or default_architecture()
    gt = np.asarray(gt, dtype=float)
    if reach_mask is not None and not bool(query(reach_mask, gt[-1])):
        return 0.0, np.zeros(arch.param_count)
    dist, cache = forward_with_cache(params, _context_vector(context), arch)
    if target == "mean":
        loss, dgrad = relaxed_mean_dist_grad(dist, field)
    else:
        modes = rng.choice(dist.n_modes, size=est_cfg.samples, p=dist.probs)
        eps = rng.standard_normal((est_cfg.samples, dist.n_waypoints, 2))
        loss, dgrad = relaxed_samples_dist_grad_from_noise(dist, field, modes, eps)
    flat = backprop(params, cache, dgrad)
    if not np.isfinite(flat).all():
        raise NonFiniteGradient("relaxed loss gradient has NaN/inf")
    return loss, flat


# --- scene preparation ----------------------------------------------------------

@dataclass(eq=False)
class PreparedActor:
    """Everything the losses need for one actor, precomputed once."""

    scene_seed: int
    actor_id: int
    behavior: str
    pose: Pose
    features: np.ndarray  # (34,)
    gt_local: np.ndarray  # (T, 2) actor frame
    reach_mask: RasterMask
    route_mask: RasterMask
    gt_end_in_reach: bool
    field: DistanceField | None = None


def _field_kind_for_mode(mode: str) -> str | None:
    if mode.startswith("relaxed_centerline"):
        return "to_centerline"
    if mode.startswith("relaxed_boundary"):
        return "to_boundary"
    return None


def _sdv_candidates(scene: Scene) -> list[int]:
    """SDV-associated segments, nearest centerline first."""
    assoc = associate_lanes(scene.graph, scene.sdv.box)
    if not assoc:
        raise InvalidConfig(f"scene {scene.seed}: SDV is off the map")
    pos = np.array([scene.sdv.box.cx, scene.sdv.box.cy])
    dists = {
        sid: project_to_polyline(scene.graph.segment(sid).centerline, pos)[1]
        for sid in assoc
    }
    return sorted(assoc, key=lambda sid: (dists[sid], sid))


def sdv_segment(scene: Scene) -> int:
    """Lane segment the SDV currently occupies (closest centerline wins)."""
    return _sdv_candidates(scene)[0]


def sdv_route(scene: Scene, yellow_is_red: bool = False):
    """SDV route toward the scene goal, horizon max(40 m, 5 s x speed).

    A box straddling lanes (mid lane change, fork junctions) can sit
    closest to a lane that cannot legally reach the goal; candidates are
    tried nearest-first so the mission-consistent lane wins.
    """
    horizon = max(ROUTE_HORIZON_FLOOR, 5.0 * scene.sdv.speed)
    last_err = None
    for sid in _sdv_candidates(scene):
        try:
            return compute_route(scene.graph, sid, scene.goal_segment, horizon,
                                 yellow_is_red=yellow_is_red)
        except NoRoute as exc:
            last_err = exc
    raise last_err


def prepare_scene(
    scene: Scene, mode: str = "reinforce", yellow_is_red: bool = False
) -> list[PreparedActor]:
    """Per-actor features, masks and (for relaxed modes) distance fields.

    The SDV route is computed once from the SDV segment toward the scene
    goal with horizon max(40 m, 5 s x SDV speed); each actor then gets the
    route and its own reachable-lane set rasterized in its frame.
    """
    if mode not in LOSS_MODES:
        raise InvalidConfig(f"unknown loss mode {mode!r}")
    graph = scene.graph
    pruned = prune_illegal_edges(graph, yellow_is_red=yellow_is_red)
    route_ids = sdv_route(scene, yellow_is_red=yellow_is_red)
    field_kind = _field_kind_for_mode(mode)

    prepared = []
    for actor in scene.actors:
        pose = Pose(actor.box.cx, actor.box.cy, actor.box.heading)
        ctx = extract_features(graph, actor)
        assoc = associate_lanes(graph, actor.box)
        reach_ids = reachable_lanes(pruned, set(assoc), REACH_BUDGET) if assoc else set()
        reach_mask = rasterize(graph, reach_ids, pose)
        route_mask = rasterize(graph, route_ids, pose)
        gt_local = pose.to_local(np.asarray(actor.future_gt, dtype=float))
        gt_end_in = bool(query(reach_mask, gt_local[-1]))
        fld = None
        if field_kind == "to_boundary" and reach_ids:
            fld = distance_transform(reach_mask, "to_boundary")
        elif field_kind == "to_centerline" and reach_ids:
            cls = [graph.segment(sid).centerline for sid in sorted(reach_ids)]
            fld = distance_transform(reach_mask, "to_centerline", centerlines=cls)
        prepared.append(
            PreparedActor(
                scene_seed=scene.seed,
                actor_id=actor.id,
                behavior=actor.behavior,
                pose=pose,
                features=ctx.to_vector(),
                gt_local=gt_local,
                reach_mask=reach_mask,
                route_mask=route_mask,
                gt_end_in_reach=gt_end_in,
                field=fld,
            )
        )
    return prepared


# --- composite loss ---------------------------------------------------------------

def total_loss_grad(
    params: np.ndarray,
    scene_batch: Sequence,
    weights: LossWeights,
    est_cfg: EstimatorConfig,
    reward_cfg: RewardConfig,
    rng: np.random.Generator,
    mode: str = "reinforce",
    arch: Architecture | None = None,
):
    """Batch loss beta*L_sym + gamma*L_prior and its parameter gradient.

    ``scene_batch`` may hold Scene objects (prepared on the fly) or
    PreparedActor objects (preferred inside training loops). Returns
    (loss, flat gradient, components dict); components carry the unweighted
    mean symmetric and prior losses.
    """
    if mode not in LOSS_MODES:
        raise InvalidConfig(f"unknown loss mode {mode!r}")
    if len(scene_batch) == 0:
        raise InvalidConfig("empty batch")
    arch = arch or default_architecture()
    actors: list[PreparedActor] = []
    for item in scene_batch:
        if isinstance(item, PreparedActor):
            actors.append(item)
        else:
            actors.extend(prepare_scene(item, mode=mode))
    if not actors:
        raise InvalidConfig("batch contains no actors")

    grad = np.zeros(arch.param_count)
    sym_total = 0.0
    prior_total = 0.0
    target = "samples" if mode.endswith("_reparam") else "mean"
    for pa in actors:
        dist, cache = forward_with_cache(params, pa.features, arch)
        dgrad = DistGrad.zeros(arch.n_modes, arch.n_waypoints)
        sym, sym_g = symmetric_loss_dist_grad(dist, pa.gt_local)
        sym_total += sym
        dgrad.add_scaled(sym_g, weights.beta)
        if mode == "reinforce":
            if pa.gt_end_in_reach:
                ys, _, _ = sample_waypoint_array(
                    dist, est_cfg.samples, rng, smooth=False
                )
                totals, per_t = batch_rewards(
                    ys, pa.gt_local, pa.reach_mask, pa.route_mask, reward_cfg
                )
                ploss, pgrad = score_function_dist_grad(
                    dist, ys, totals, per_t, est_cfg.attribution, est_cfg.baseline
                )
                prior_total += ploss
                dgrad.add_scaled(pgrad, weights.gamma)
        elif mode != "mle_only":
            if pa.field is not None and pa.gt_end_in_reach:
                if target == "mean":
                    ploss, pgrad = relaxed_mean_dist_grad(dist, pa.field)
                else:
                    modes = rng.choice(dist.n_modes, size=est_cfg.samples, p=dist.probs)
                    eps = rng.standard_normal((est_cfg.samples, dist.n_waypoints, 2))
                    ploss, pgrad = relaxed_samples_dist_grad_from_noise(
                        dist, pa.field, modes, eps
                    )
                prior_total += ploss
                dgrad.add_scaled(pgrad, weights.gamma)
        grad += backprop(params, cache, dgrad)

    n = len(actors)
    grad /= n
    sym_mean = sym_total / n
    prior_mean = prior_total / n
    loss = weights.beta * sym_mean + (
        weights.gamma * prior_mean if mode != "mle_only" else 0.0
    )
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise NonFiniteGradient("total loss/gradient has NaN/inf")
    return float(loss), grad, {"sym": sym_mean, "prior": prior_mean}


__all__ = [
    "LOSS_MODES",
    "RewardConfig",
    "LossWeights",
    "EstimatorConfig",
    "PreparedActor",
    "reach_reward",
    "route_reward",
    "batch_rewards",
    "trajectory_reward",
    "score_function_dist_grad",
    "reinforce_grad",
    "closest_mode",
    "symmetric_loss",
    "symmetric_loss_dist_grad",
    "symmetric_loss_grad",
    "relaxed_mean_dist_grad",
    "relaxed_samples_dist_grad_from_noise",
    "relaxed_loss",
    "sdv_segment",
    "sdv_route",
    "prepare_scene",
    "total_loss_grad",
]
