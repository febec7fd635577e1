"""Multimodal trajectory forecaster.

The model maps a 34-value actor context through a two-hidden-layer tanh MLP
to a mixture of K trajectory modes; each mode is a sequence of T bivariate
Gaussians with full covariance (scales via softplus + 1e-3 floor,
correlation via 0.99 * tanh). All gradients are computed in closed form
with numpy — the score-function training path needs gradients of sampled
log-likelihoods w.r.t. every network weight, and writing the reverse pass
by hand keeps the package free of autodiff frameworks.

Feature vector layout (34 values):
  [0]      speed (m/s)
  [1]      heading rate (rad/s)
  [2:12]   5 past positions, actor frame, oldest first (last is the origin)
  [12:32]  10 centerline lookahead points at 5 m spacing, actor frame
  [32]     red-light-within-30-m flag (0/1)
  [33]     distance to next light-governed segment entry (m, clamped 0-60)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointError,
    InvalidCovariance,
    NonFiniteGradient,
    NonFiniteParams,
    ShapeMismatch,
)
from .geometry import (
    Pose,
    cumulative_arclength,
    point_at_arclength,
    project_to_polyline,
    wrap_angle,
)
from .lane_graph import LaneGraph, associate_lanes

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-3
RHO_SCALE = 0.99
N_FEATURES = 34
PAST_STEPS = 5
LOOKAHEAD_POINTS = 10
LOOKAHEAD_SPACING = 5.0
RED_LIGHT_RANGE = 30.0
INTERSECTION_CLAMP = 60.0

CHECKPOINT_MAGIC = b"PFC\x01"
CHECKPOINT_VERSION = 1


# --- architecture and parameters -------------------------------------------

@dataclass(frozen=True, eq=False)
class Architecture:
    """MLP shape. feature_scale rescales inputs before the first layer."""

    n_features: int = N_FEATURES
    hidden: tuple[int, int] = (128, 128)
    n_modes: int = 16
    n_waypoints: int = 11
    feature_scale: np.ndarray | None = None

    @property
    def n_outputs(self) -> int:
        return self.n_modes * (1 + 5 * self.n_waypoints)

    @property
    def param_count(self) -> int:
        f, (h1, h2), o = self.n_features, self.hidden, self.n_outputs
        return f * h1 + h1 + h1 * h2 + h2 + h2 * o + o

    def scale_vector(self) -> np.ndarray:
        if self.feature_scale is not None:
            return self.feature_scale
        return np.ones(self.n_features)


def _default_feature_scale() -> np.ndarray:
    scale = np.empty(N_FEATURES)
    scale[0] = 0.1  # speed
    scale[1] = 1.0  # heading rate
    scale[2:12] = 0.05  # past positions
    scale[12:32] = 0.02  # lookahead points
    scale[32] = 1.0  # red-light flag
    scale[33] = 1.0 / 30.0  # intersection distance
    return scale


def default_architecture(n_modes: int = 16, n_waypoints: int = 11) -> Architecture:
    return Architecture(
        n_modes=n_modes,
        n_waypoints=n_waypoints,
        feature_scale=_default_feature_scale(),
    )


def init_params(arch: Architecture, seed: int = 0) -> np.ndarray:
    """He-style scaled-uniform hidden layers; zero final layer."""
    rng = np.random.default_rng(seed)
    f, (h1, h2), o = arch.n_features, arch.hidden, arch.n_outputs
    parts = []
    for fan_in, fan_out in ((f, h1), (h1, h2)):
        limit = np.sqrt(6.0 / fan_in)
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    parts.append(np.zeros(h2 * o))
    parts.append(np.zeros(o))
    return np.concatenate(parts)


def _unpack(params: np.ndarray, arch: Architecture):
    f, (h1, h2), o = arch.n_features, arch.hidden, arch.n_outputs
    sizes = [f * h1, h1, h1 * h2, h2, h2 * o, o]
    if params.shape != (sum(sizes),):
        raise ShapeMismatch(
            f"expected {sum(sizes)} parameters, got array of shape {params.shape}"
        )
    off = 0
    views = []
    for size in sizes:
        views.append(params[off : off + size])
        off += size
    w1 = views[0].reshape(f, h1)
    w2 = views[2].reshape(h1, h2)
    w3 = views[4].reshape(h2, o)
    return w1, views[1], w2, views[3], w3, views[5]


# --- distribution -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectoryDistribution:
    """Mixture of K trajectory modes, each a chain of T 2D Gaussians."""

    logits: np.ndarray  # (K,)
    mu: np.ndarray  # (K, T, 2)
    sigma: np.ndarray  # (K, T, 2), strictly positive
    rho: np.ndarray  # (K, T), in (-1, 1)
    log_probs: np.ndarray  # (K,), log-softmax of logits
    probs: np.ndarray  # (K,)

    @property
    def n_modes(self) -> int:
        return int(self.logits.shape[0])

    @property
    def n_waypoints(self) -> int:
        return int(self.mu.shape[1])


def make_distribution(logits, mu, sigma, rho) -> TrajectoryDistribution:
    logits = np.asarray(logits, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if sigma.min() <= 0.0:
        raise InvalidCovariance("sigma must be strictly positive")
    if np.abs(rho).max() >= 1.0:
        raise InvalidCovariance("rho must lie in (-1, 1)")
    log_probs = logits - _logsumexp(logits)
    return TrajectoryDistribution(
        logits=logits,
        mu=mu,
        sigma=sigma,
        rho=rho,
        log_probs=log_probs,
        probs=np.exp(log_probs),
    )


@dataclass(eq=False)
class DistGrad:
    """Gradient of a scalar w.r.t. (logits, mu, sigma, rho)."""

    d_logits: np.ndarray  # (K,)
    d_mu: np.ndarray  # (K, T, 2)
    d_sigma: np.ndarray  # (K, T, 2)
    d_rho: np.ndarray  # (K, T)

    @classmethod
    def zeros(cls, n_modes: int, n_waypoints: int) -> "DistGrad":
        return cls(
            d_logits=np.zeros(n_modes),
            d_mu=np.zeros((n_modes, n_waypoints, 2)),
            d_sigma=np.zeros((n_modes, n_waypoints, 2)),
            d_rho=np.zeros((n_modes, n_waypoints)),
        )

    def add_scaled(self, other: "DistGrad", scale: float = 1.0) -> "DistGrad":
        self.d_logits += scale * other.d_logits
        self.d_mu += scale * other.d_mu
        self.d_sigma += scale * other.d_sigma
        self.d_rho += scale * other.d_rho
        return self


def _logsumexp(x, axis=None):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out.squeeze(axis) if axis is not None else float(out.squeeze())


# --- forward / backward -----------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _raw_to_distribution(raw: np.ndarray, arch: Architecture):
    k, t = arch.n_modes, arch.n_waypoints
    block = raw.reshape(k, 1 + 5 * t)
    logits = block[:, 0].copy()
    rest = block[:, 1:].reshape(k, t, 5)
    mu = rest[:, :, 0:2].copy()
    s_raw = rest[:, :, 2:4]
    c_raw = rest[:, :, 4]
    sigma = np.logaddexp(0.0, s_raw) + SIGMA_FLOOR
    rho = RHO_SCALE * np.tanh(c_raw)
    return logits, mu, sigma, rho, s_raw.copy(), c_raw.copy()


def forward(params: np.ndarray, features: np.ndarray, arch: Architecture) -> TrajectoryDistribution:
    dist, _ = forward_with_cache(params, features, arch)
    return dist


def forward_with_cache(params: np.ndarray, features: np.ndarray, arch: Architecture):
    """Run the MLP; returns (distribution, cache for backprop)."""
    params = np.asarray(params, dtype=float)
    if not np.isfinite(params).all():
        raise NonFiniteParams("parameters contain NaN/inf")
    x = np.asarray(features, dtype=float)
    if x.shape != (arch.n_features,):
        raise ShapeMismatch(f"features must be ({arch.n_features},), got {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteParams("features contain NaN/inf")
    w1, b1, w2, b2, w3, b3 = _unpack(params, arch)
    xs = x * arch.scale_vector()
    a1 = np.tanh(xs @ w1 + b1)
    a2 = np.tanh(a1 @ w2 + b2)
    raw = a2 @ w3 + b3
    logits, mu, sigma, rho, s_raw, c_raw = _raw_to_distribution(raw, arch)
    dist = make_distribution(logits, mu, sigma, rho)
    cache = {"arch": arch, "xs": xs, "a1": a1, "a2": a2, "s_raw": s_raw, "c_raw": c_raw}
    return dist, cache


def backprop(params: np.ndarray, cache: dict, dgrad: DistGrad) -> np.ndarray:
    """Pull a DistGrad back to a flat parameter gradient.

    ``dgrad`` holds derivatives w.r.t. raw logits and the squashed mu, sigma
    and rho; the squash Jacobians and the MLP reverse pass are applied here.
    """
    arch: Architecture = cache["arch"]
    k, t = arch.n_modes, arch.n_waypoints
    w1, b1, w2, b2, w3, b3 = _unpack(np.asarray(params, dtype=float), arch)

    d_raw = np.empty((k, 1 + 5 * t))
    d_raw[:, 0] = dgrad.d_logits
    rest = d_raw[:, 1:].reshape(k, t, 5)
    rest[:, :, 0:2] = dgrad.d_mu
    rest[:, :, 2:4] = dgrad.d_sigma * _sigmoid(cache["s_raw"])
    rest[:, :, 4] = dgrad.d_rho * RHO_SCALE * (1.0 - np.tanh(cache["c_raw"]) ** 2)
    d_raw = d_raw.reshape(-1)

    a1, a2, xs = cache["a1"], cache["a2"], cache["xs"]
    d_w3 = np.outer(a2, d_raw)
    d_b3 = d_raw
    d_a2 = w3 @ d_raw
    d_z2 = d_a2 * (1.0 - a2**2)
    d_w2 = np.outer(a1, d_z2)
    d_b2 = d_z2
    d_a1 = w2 @ d_z2
    d_z1 = d_a1 * (1.0 - a1**2)
    d_w1 = np.outer(xs, d_z1)
    d_b1 = d_z1
    return np.concatenate(
        [d_w1.ravel(), d_b1, d_w2.ravel(), d_b2, d_w3.ravel(), d_b3]
    )


# --- Gaussian math ----------------------------------------------------------

def gauss_log_density(point, mu, sigma, rho) -> float:
    """Log density of one bivariate Gaussian at one point."""
    p = np.asarray(point, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sx, sy = float(sigma[0]), float(sigma[1])
    rho = float(rho)
    if sx <= 0.0 or sy <= 0.0 or abs(rho) >= 1.0:
        raise InvalidCovariance("need sigma > 0 and |rho| < 1")
    dx = (p[0] - mu[0]) / sx
    dy = (p[1] - mu[1]) / sy
    one = 1.0 - rho * rho
    q = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / one
    return float(-LOG_2PI - np.log(sx) - np.log(sy) - 0.5 * np.log(one) - 0.5 * q)


def gaussian_log_batch(dist: TrajectoryDistribution, ys: np.ndarray) -> np.ndarray:
    """Per-mode per-waypoint log densities; ys (S, T, 2) -> (S, K, T)."""
    mu, sigma, rho = dist.mu, dist.sigma, dist.rho
    sx, sy = sigma[..., 0], sigma[..., 1]
    dx = (ys[:, None, :, 0] - mu[None, :, :, 0]) / sx
    dy = (ys[:, None, :, 1] - mu[None, :, :, 1]) / sy
    one = 1.0 - rho**2
    q = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / one
    return -LOG_2PI - np.log(sx) - np.log(sy) - 0.5 * np.log(one) - 0.5 * q


def gaussian_log_and_grads(dist: TrajectoryDistribution, ys: np.ndarray):
    """Log densities plus their gradients w.r.t. mu, sigma, rho.

    ys: (S, T, 2). Returns (logn (S,K,T), d_mu (S,K,T,2), d_sigma (S,K,T,2),
    d_rho (S,K,T)).
    """
    mu, sigma, rho = dist.mu, dist.sigma, dist.rho
    sx, sy = sigma[..., 0], sigma[..., 1]
    dx = (ys[:, None, :, 0] - mu[None, :, :, 0]) / sx
    dy = (ys[:, None, :, 1] - mu[None, :, :, 1]) / sy
    one = 1.0 - rho**2
    q = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / one
    logn = -LOG_2PI - np.log(sx) - np.log(sy) - 0.5 * np.log(one) - 0.5 * q
    u = (dx - rho * dy) / one
    v = (dy - rho * dx) / one
    d_mu = np.stack([u / sx, v / sy], axis=-1)
    d_sigma = np.stack([(dx * u - 1.0) / sx, (dy * v - 1.0) / sy], axis=-1)
    d_rho = (rho + dx * dy - rho * q) / one
    return logn, d_mu, d_sigma, d_rho


def waypoint_log_likelihood(dist: TrajectoryDistribution, t: int, point) -> float:
    """Log of the mixture marginal density at waypoint index t."""
    if not 0 <= t < dist.n_waypoints:
        raise ShapeMismatch(f"waypoint index {t} out of range")
    logn = np.array(
        [
            gauss_log_density(point, dist.mu[k, t], dist.sigma[k, t], dist.rho[k, t])
            for k in range(dist.n_modes)
        ]
    )
    return float(_logsumexp(dist.log_probs + logn))


def log_likelihood(dist: TrajectoryDistribution, trajectory: np.ndarray) -> float:
    """Log mixture likelihood of a full trajectory (T, 2)."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.shape != (dist.n_waypoints, 2):
        raise ShapeMismatch(f"trajectory must be ({dist.n_waypoints}, 2)")
    logn = gaussian_log_batch(dist, traj[None])[0]  # (K, T)
    return float(_logsumexp(dist.log_probs + logn.sum(axis=1)))


def loglik_dist_grad(dist: TrajectoryDistribution, trajectory: np.ndarray):
    """(log p(y|x), DistGrad of log p) for a full trajectory."""
    traj = np.asarray(trajectory, dtype=float)
    logn, d_mu, d_sigma, d_rho = gaussian_log_and_grads(dist, traj[None])
    logn, d_mu, d_sigma, d_rho = logn[0], d_mu[0], d_sigma[0], d_rho[0]
    mode_logp = dist.log_probs + logn.sum(axis=1)  # (K,)
    total = _logsumexp(mode_logp)
    resp = np.exp(mode_logp - total)  # (K,)
    g = DistGrad(
        d_logits=resp - dist.probs,
        d_mu=resp[:, None, None] * d_mu,
        d_sigma=resp[:, None, None] * d_sigma,
        d_rho=resp[:, None] * d_rho,
    )
    return float(total), g


def grad_log_likelihood(
    params: np.ndarray, features: np.ndarray, trajectory: np.ndarray, arch: Architecture
):
    """End-to-end gradient of log p(trajectory | features) w.r.t. params."""
    dist, cache = forward_with_cache(params, features, arch)
    value, dgrad = loglik_dist_grad(dist, trajectory)
    flat = backprop(params, cache, dgrad)
    if not np.isfinite(flat).all():
        raise NonFiniteGradient("log-likelihood gradient has NaN/inf")
    return value, flat


# --- covariance / sampling --------------------------------------------------

def cholesky_2x2(sigma, rho: float) -> np.ndarray:
    """Lower-triangular L with L @ L.T equal to the 2x2 covariance."""
    sx, sy = float(sigma[0]), float(sigma[1])
    rho = float(rho)
    if sx <= 0.0 or sy <= 0.0 or abs(rho) >= 1.0:
        raise InvalidCovariance("need sigma > 0 and |rho| < 1")
    return np.array([[sx, 0.0], [rho * sy, sy * np.sqrt(1.0 - rho * rho)]])


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    """One drawn trajectory with its provenance."""

    waypoints: np.ndarray  # (T, 2)
    mode: int
    noise: np.ndarray  # (2,) for smooth draws, (T, 2) for independent


def sample_waypoint_array(
    dist: TrajectoryDistribution,
    n_samples: int,
    rng: np.random.Generator,
    smooth: bool = False,
):
    """Vectorized sampler; returns (ys (n,T,2), modes (n,), eps).

    Independent mode draws fresh noise per waypoint; smooth mode reuses a
    single 2D noise vector across all waypoints of a sample, which keeps the
    drawn trajectory on one side of the mean sequence.
    """
    k, t = dist.n_modes, dist.n_waypoints
    modes = rng.choice(k, size=n_samples, p=dist.probs)
    if smooth:
        eps = rng.standard_normal((n_samples, 2))
        ex = eps[:, 0:1]
        ey = eps[:, 1:2]
    else:
        eps = rng.standard_normal((n_samples, t, 2))
        ex = eps[..., 0]
        ey = eps[..., 1]
    mu = dist.mu[modes]  # (n, T, 2)
    sx = dist.sigma[modes, :, 0]
    sy = dist.sigma[modes, :, 1]
    rho = dist.rho[modes]
    ys = np.empty((n_samples, t, 2))
    ys[..., 0] = mu[..., 0] + sx * ex
    ys[..., 1] = mu[..., 1] + sy * (rho * ex + np.sqrt(1.0 - rho**2) * ey)
    return ys, modes, eps


def sample_trajectories(
    dist: TrajectoryDistribution,
    n_samples: int,
    rng: np.random.Generator,
    mode: str = "independent",
) -> list[TrajectorySample]:
    """Draw trajectory samples; mode is "independent" or "smooth"."""
    if mode not in ("independent", "smooth"):
        raise ShapeMismatch(f"unknown sampling mode {mode!r}")
    smooth = mode == "smooth"
    ys, modes, eps = sample_waypoint_array(dist, n_samples, rng, smooth=smooth)
    return [
        TrajectorySample(waypoints=ys[i], mode=int(modes[i]), noise=eps[i])
        for i in range(n_samples)
    ]


# --- feature extraction -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActorContext:
    """Model input for one actor, expressed in the actor frame."""

    speed: float
    heading_rate: float
    past_xy: np.ndarray  # (5, 2), oldest first; last row is the origin
    lookahead: np.ndarray  # (10, 2), zero-padded past the end of the map
    red_light_ahead: float  # 0.0 / 1.0
    intersection_distance: float  # m, clamped to [0, 60]

    def to_vector(self) -> np.ndarray:
        vec = np.concatenate(
            [
                [self.speed, self.heading_rate],
                self.past_xy.reshape(-1),
                self.lookahead.reshape(-1),
                [self.red_light_ahead, self.intersection_distance],
            ]
        )
        return vec


def _straightest_successor(graph: LaneGraph, seg_id: int) -> int | None:
    """Successor with the smallest heading change at the junction."""
    succ = graph.successors(seg_id)
    if not succ:
        return None
    cl = graph.segment(seg_id).centerline
    d = cl[-1] - cl[-2]
    head = np.arctan2(d[1], d[0])
    best, best_turn = None, None
    for sid in sorted(succ):
        ncl = graph.segment(sid).centerline
        nd = ncl[1] - ncl[0]
        turn = abs(float(wrap_angle(np.arctan2(nd[1], nd[0]) - head)))
        if best is None or turn < best_turn - 1e-12:
            best, best_turn = sid, turn
    return best


def _walk_chain(graph: LaneGraph, seg_id: int, s0: float, needed: float):
    """Follow straightest successors from (seg, s0) for ``needed`` meters.

    Returns (points (N,2) world along the chain, entries) where entries is
    [(arc distance from start, segment id)] for every segment entered after
    the first.
    """
    pts = [graph.segment(seg_id).centerline]
    entries: list[tuple[float, int]] = []
    dist_to_end = graph.seg_length(seg_id) - s0
    seen = {seg_id}
    cur = seg_id
    while dist_to_end < needed:
        nxt = _straightest_successor(graph, cur)
        if nxt is None or nxt in seen:
            break
        entries.append((dist_to_end, nxt))
        pts.append(graph.segment(nxt).centerline)
        dist_to_end += graph.seg_length(nxt)
        seen.add(nxt)
        cur = nxt
    chain = np.concatenate(pts, axis=0)
    return chain, entries


def extract_features(graph: LaneGraph, actor) -> ActorContext:
    """Build the model input for one actor track.

    ``actor`` needs past poses (5, 3), an oriented box and a speed, as
    produced by the scene generator. Off-map actors get zero lookahead
    points, a zero red-light flag and the clamped maximum intersection
    distance.
    """
    past = np.asarray(actor.past, dtype=float)
    if past.shape != (PAST_STEPS, 3):
        raise ShapeMismatch(f"past poses must be ({PAST_STEPS}, 3)")
    pose = Pose(float(past[-1, 0]), float(past[-1, 1]), float(past[-1, 2]))
    past_xy = pose.to_local(past[:, :2])
    heading_rate = float(wrap_angle(past[-1, 2] - past[-2, 2])) / 0.5

    lookahead = np.zeros((LOOKAHEAD_POINTS, 2))
    red_flag = 0.0
    inter_dist = INTERSECTION_CLAMP
    assoc = associate_lanes(graph, actor.box)
    if assoc:
        # Associate with the segment whose centerline passes closest.
        best_sid, best_d, best_s = None, None, 0.0
        for sid in assoc:
            s, d = project_to_polyline(graph.segment(sid).centerline, pose.position)
            if best_d is None or d < best_d - 1e-12:
                best_sid, best_d, best_s = sid, d, s
        chain, entries = _walk_chain(
            graph,
            best_sid,
            best_s,
            needed=LOOKAHEAD_POINTS * LOOKAHEAD_SPACING + 1.0,
        )
        s_chain, _ = project_to_polyline(chain, pose.position)
        chain_len = float(cumulative_arclength(chain)[-1])
        for i in range(LOOKAHEAD_POINTS):
            s = s_chain + LOOKAHEAD_SPACING * (i + 1)
            if s > chain_len + 1e-9:
                break  # remaining rows stay zero
            p, _ = point_at_arclength(chain, s)
            lookahead[i] = pose.to_local(p)

        red_ids = graph.red_governed()
        cur_seg = graph.segment(best_sid)
        if cur_seg.light_control is not None:
            inter_dist = 0.0
            if best_sid in red_ids:
                red_flag = 1.0
        else:
            for entry_dist, sid in entries:
                if graph.segment(sid).light_control is not None:
                    inter_dist = min(float(entry_dist), INTERSECTION_CLAMP)
                    if sid in red_ids and entry_dist <= RED_LIGHT_RANGE:
                        red_flag = 1.0
                    break

    ctx = ActorContext(
        speed=float(actor.speed),
        heading_rate=heading_rate,
        past_xy=past_xy,
        lookahead=lookahead,
        red_light_ahead=red_flag,
        intersection_distance=float(inter_dist),
    )
    vec = ctx.to_vector()
    if not np.isfinite(vec).all():
        raise NonFiniteParams("actor context contains NaN/inf")
    return ctx


# --- checkpoints ------------------------------------------------------------

def save_params(path, params: np.ndarray, arch: Architecture) -> None:
    """Binary checkpoint: 32-byte header, optional feature-scale block,
    then little-endian float64 parameters."""
    params = np.asarray(params, dtype=float)
    if params.shape != (arch.param_count,):
        raise ShapeMismatch("parameter vector does not match architecture")
    has_scale = arch.feature_scale is not None
    header = CHECKPOINT_MAGIC + struct.pack(
        "<IIIIIII",
        CHECKPOINT_VERSION,
        arch.n_features,
        arch.hidden[0],
        arch.hidden[1],
        arch.n_modes,
        arch.n_waypoints,
        1 if has_scale else 0,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        if has_scale:
            fh.write(np.asarray(arch.feature_scale, dtype="<f8").tobytes())
        fh.write(params.astype("<f8").tobytes())


def load_params(path) -> tuple[np.ndarray, Architecture]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 32 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a parameter checkpoint")
    version, n_features, h1, h2, n_modes, n_waypoints, has_scale = struct.unpack(
        "<IIIIIII", blob[4:32]
    )
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 32
    scale = None
    if has_scale:
        end = off + 8 * n_features
        if len(blob) < end:
            raise CheckpointError("checkpoint truncated in feature-scale block")
        scale = np.frombuffer(blob[off:end], dtype="<f8").astype(float)
        off = end
    arch = Architecture(
        n_features=n_features,
        hidden=(h1, h2),
        n_modes=n_modes,
        n_waypoints=n_waypoints,
        feature_scale=scale,
    )
    params = np.frombuffer(blob[off:], dtype="<f8").astype(float)
    if params.shape != (arch.param_count,):
        raise CheckpointError(
            f"checkpoint holds {params.size} values, expected {arch.param_count}"
        )
    if not np.isfinite(params).all():
        raise CheckpointError("checkpoint contains non-finite values")
    return params, arch


def params_to_json(params: np.ndarray, arch: Architecture) -> str:
    payload = {
        "version": CHECKPOINT_VERSION,
        "n_features": arch.n_features,
        "hidden": list(arch.hidden),
        "n_modes": arch.n_modes,
        "n_waypoints": arch.n_waypoints,
        "params": [float(v) for v in np.asarray(params, dtype=float)],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


__all__ = [
    "Architecture",
    "ActorContext",
    "DistGrad",
    "TrajectoryDistribution",
    "TrajectorySample",
    "default_architecture",
    "init_params",
    "forward",
    "forward_with_cache",
    "backprop",
    "gauss_log_density",
    "gaussian_log_batch",
    "gaussian_log_and_grads",
    "waypoint_log_likelihood",
    "log_likelihood",
    "loglik_dist_grad",
    "grad_log_likelihood",
    "cholesky_2x2",
    "sample_waypoint_array",
    "sample_trajectories",
    "extract_features",
    "save_params",
    "load_params",
    "params_to_json",
]
