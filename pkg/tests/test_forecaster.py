import dataclasses
import math

import numpy as np
import pytest

from priorforecast import forecaster
from priorforecast.errors import (
    CheckpointError,
    InvalidCovariance,
    ShapeMismatch,
)
from priorforecast.forecaster import (
    Architecture,
    cholesky_2x2,
    default_architecture,
    extract_features,
    forward,
    gauss_log_density,
    grad_log_likelihood,
    init_params,
    load_params,
    log_likelihood,
    loglik_dist_grad,
    make_distribution,
    sample_trajectories,
    sample_waypoint_array,
    save_params,
    waypoint_log_likelihood,
)
from priorforecast.geometry import OrientedBox, polygon_from_centerline
from priorforecast.lane_graph import LaneSegment, build_graph

LOG_UNIT_GAUSS = -1.8378770664093453  # log(1/(2*pi))

SMALL = Architecture(n_features=6, hidden=(16, 16), n_modes=3, n_waypoints=4)


def random_dist(rng, k=4, t=5, sigma_lo=0.2):
    return make_distribution(
        logits=rng.normal(0.0, 1.0, size=k),
        mu=rng.normal(0.0, 5.0, size=(k, t, 2)),
        sigma=rng.uniform(sigma_lo, 2.0, size=(k, t, 2)),
        rho=rng.uniform(-0.8, 0.8, size=(k, t)),
    )


def test_default_param_count():
    arch = default_architecture()
    assert arch.param_count == 136_576
    assert init_params(arch, seed=0).shape == (136_576,)


def test_init_distribution_is_neutral():
    # The zeroed last layer makes the initial distribution input-independent:
    # uniform modes, zero means, softplus(0) + floor sigmas, zero rho.
    arch = default_architecture()
    params = init_params(arch, seed=3)
    dist = forward(params, np.random.default_rng(0).normal(size=34), arch)
    assert np.allclose(dist.probs, 1.0 / 16.0)
    assert np.all(dist.mu == 0.0)
    assert np.allclose(dist.sigma, math.log(2.0) + 1e-3)
    assert np.all(dist.rho == 0.0)


def test_make_distribution_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidCovariance):
        make_distribution([0.0], np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 2)))
    with pytest.raises(InvalidCovariance):
        make_distribution([0.0], np.zeros((1, 2, 2)), np.ones((1, 2, 2)), np.ones((1, 2)))
    d = random_dist(rng)
    assert d.probs.sum() == pytest.approx(1.0)
    assert np.allclose(np.log(d.probs), d.log_probs)


def test_gauss_log_density_closed_form():
    assert gauss_log_density([0, 0], [0, 0], [1, 1], 0.0) == pytest.approx(LOG_UNIT_GAUSS)
    # One sigma out along x: subtract 1/2.
    assert gauss_log_density([1, 0], [0, 0], [1, 1], 0.0) == pytest.approx(
        LOG_UNIT_GAUSS - 0.5
    )
    # Correlated case against the explicit quadratic form.
    val = gauss_log_density([0.3, -0.2], [0.1, 0.4], [0.5, 2.0], 0.6)
    dx, dy = 0.2 / 0.5, -0.6 / 2.0
    q = (dx * dx - 2 * 0.6 * dx * dy + dy * dy) / (1 - 0.36)
    expect = LOG_UNIT_GAUSS - math.log(0.5) - math.log(2.0) - 0.5 * math.log(1 - 0.36) - 0.5 * q
    assert val == pytest.approx(expect, abs=1e-12)
    with pytest.raises(InvalidCovariance):
        gauss_log_density([0, 0], [0, 0], [0.0, 1.0], 0.0)


def test_log_likelihood_single_mode_closed_form():
    t = 11
    dist = make_distribution(
        [0.0], np.zeros((1, t, 2)), np.ones((1, t, 2)), np.zeros((1, t))
    )
    assert log_likelihood(dist, np.zeros((t, 2))) == pytest.approx(t * LOG_UNIT_GAUSS)
    with pytest.raises(ShapeMismatch):
        log_likelihood(dist, np.zeros((t + 1, 2)))


def test_waypoint_log_likelihood_mixture():
    # Two identical equal-weight modes: marginal equals the single Gaussian.
    t = 3
    dist = make_distribution(
        [0.7, 0.7], np.zeros((2, t, 2)), np.ones((2, t, 2)), np.zeros((2, t))
    )
    assert waypoint_log_likelihood(dist, 1, [0.0, 0.0]) == pytest.approx(LOG_UNIT_GAUSS)
    with pytest.raises(ShapeMismatch):
        waypoint_log_likelihood(dist, t, [0.0, 0.0])


def _dist_from_raw(logits, mu, sigma, rho):
    return make_distribution(logits, mu, sigma, rho)


def test_loglik_dist_grad_finite_difference():
    rng = np.random.default_rng(12)
    h = 1e-6
    for _ in range(10):
        k, t = 3, 4
        logits = rng.normal(size=k)
        mu = rng.normal(0, 3, size=(k, t, 2))
        sigma = rng.uniform(0.3, 1.5, size=(k, t, 2))
        rho = rng.uniform(-0.7, 0.7, size=(k, t))
        traj = rng.normal(0, 3, size=(t, 2))
        _, g = loglik_dist_grad(_dist_from_raw(logits, mu, sigma, rho), traj)

        def value(lo, m, s, r):
            return log_likelihood(_dist_from_raw(lo, m, s, r), traj)

        for arr, grad in ((logits, g.d_logits), (mu, g.d_mu),
                          (sigma, g.d_sigma), (rho, g.d_rho)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                up = value(logits, mu, sigma, rho)
                flat[idx] = orig - h
                dn = value(logits, mu, sigma, rho)
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                assert abs(fd - gflat[idx]) <= 1e-4 * max(1.0, abs(gflat[idx]))


def test_grad_log_likelihood_full_finite_difference():
    # Every coordinate of a small network, checked against central
    # differences end to end.
    rng = np.random.default_rng(99)
    h = 1e-6
    for _ in range(3):
        params = init_params(SMALL, seed=int(rng.integers(1 << 31)))
        params = params + rng.normal(0.0, 0.05, size=params.shape)
        feats = rng.normal(size=SMALL.n_features)
        traj = rng.normal(0, 2, size=(SMALL.n_waypoints, 2))
        _, grad = grad_log_likelihood(params, feats, traj, SMALL)

        idxs = rng.choice(params.size, size=200, replace=False)
        for idx in idxs:
            orig = params[idx]
            params[idx] = orig + h
            up = log_likelihood(forward(params, feats, SMALL), traj)
            params[idx] = orig - h
            dn = log_likelihood(forward(params, feats, SMALL), traj)
            params[idx] = orig
            fd = (up - dn) / (2 * h)
            # 1e-7 absolute floor: central differences bottom out near
            # machine_eps * |loss| / h, regardless of the true gradient.
            assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx])) + 1e-7


def test_cholesky_reconstructs_covariance():
    rng = np.random.default_rng(8)
    for _ in range(50):
        sigma = rng.uniform(0.1, 3.0, size=2)
        rho = float(rng.uniform(-0.95, 0.95))
        ell = cholesky_2x2(sigma, rho)
        cov = ell @ ell.T
        assert cov[0, 0] == pytest.approx(sigma[0] ** 2)
        assert cov[1, 1] == pytest.approx(sigma[1] ** 2)
        assert cov[0, 1] == pytest.approx(rho * sigma[0] * sigma[1])
        assert ell[0, 1] == 0.0
    with pytest.raises(InvalidCovariance):
        cholesky_2x2([1.0, 1.0], 1.0)


def test_sampling_moments():
    rng = np.random.default_rng(31)
    dist = make_distribution(
        [0.0], np.array([[[1.0, -2.0]]]), np.array([[[0.8, 1.4]]]), np.array([[0.5]])
    )
    ys, modes, _ = sample_waypoint_array(dist, 200_000, rng)
    assert set(modes) == {0}
    got = ys[:, 0, :]
    assert np.allclose(got.mean(axis=0), [1.0, -2.0], atol=0.02)
    cov = np.cov(got.T)
    assert cov[0, 0] == pytest.approx(0.64, abs=0.02)
    assert cov[1, 1] == pytest.approx(1.96, abs=0.03)
    assert cov[0, 1] == pytest.approx(0.5 * 0.8 * 1.4, abs=0.02)


def test_mode_frequencies_follow_probs():
    rng = np.random.default_rng(77)
    dist = random_dist(rng, k=5, t=2)
    _, modes, _ = sample_waypoint_array(dist, 100_000, rng)
    freq = np.bincount(modes, minlength=5) / 100_000
    assert np.abs(freq - dist.probs).max() < 0.01


def test_smooth_sampler_same_marginals_lower_roughness():
    rng = np.random.default_rng(4)
    dist = make_distribution(
        [0.0],
        np.linspace(0, 10, 8).repeat(2).reshape(1, 8, 2),
        np.full((1, 8, 2), 1.3),
        np.zeros((1, 8)),
    )
    indep, _, _ = sample_waypoint_array(dist, 50_000, rng, smooth=False)
    smooth, _, _ = sample_waypoint_array(dist, 50_000, rng, smooth=True)
    # Identical per-waypoint marginals...
    assert np.allclose(indep.mean(axis=0), smooth.mean(axis=0), atol=0.05)
    assert np.allclose(indep.std(axis=0), smooth.std(axis=0), atol=0.05)
    # ...but second differences collapse for the shared-noise draw.
    rough_i = np.abs(np.diff(indep, n=2, axis=1)).mean()
    rough_s = np.abs(np.diff(smooth, n=2, axis=1)).mean()
    assert rough_s < 0.05 * rough_i


def test_sample_trajectories_wrapper():
    rng = np.random.default_rng(6)
    dist = random_dist(rng)
    out = sample_trajectories(dist, 7, rng, mode="smooth")
    assert len(out) == 7
    assert out[0].waypoints.shape == (5, 2)
    assert out[0].noise.shape == (2,)
    with pytest.raises(ShapeMismatch):
        sample_trajectories(dist, 1, rng, mode="typo")


def test_checkpoint_roundtrip(tmp_path):
    arch = SMALL
    params = init_params(arch, seed=5) + 0.25
    path = tmp_path / "model.bin"
    save_params(path, params, arch)
    loaded, arch2 = load_params(path)
    assert np.array_equal(loaded, params)
    assert arch2.n_modes == arch.n_modes
    assert arch2.n_waypoints == arch.n_waypoints
    assert arch2.hidden == arch.hidden
    # Same inputs produce the same distribution through the loaded copy.
    feats = np.arange(arch.n_features, dtype=float)
    d1, d2 = forward(params, feats, arch), forward(loaded, feats, arch2)
    assert np.array_equal(d1.mu, d2.mu)

    with pytest.raises(ShapeMismatch):
        save_params(tmp_path / "bad.bin", params[:-1], arch)


def test_checkpoint_corruption_detected(tmp_path):
    arch = SMALL
    path = tmp_path / "model.bin"
    save_params(path, init_params(arch, 0), arch)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    bad = tmp_path / "bad_magic.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_params(bad)
    short = tmp_path / "short.bin"
    short.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointError):
        load_params(short)


@dataclasses.dataclass
class _Track:
    past: np.ndarray
    box: OrientedBox
    speed: float


def _straight_graph():
    cl = np.array([[-30.0, 0.0], [120.0, 0.0]])
    seg = LaneSegment(
        id=0, centerline=cl, polygon=polygon_from_centerline(cl, 3.6),
        left_boundary="dashed", right_boundary="dashed", light_control=None,
    )
    return build_graph([seg], [])


def test_extract_features_on_lane():
    g = _straight_graph()
    xs = np.linspace(-8.0, 0.0, 5)
    past = np.stack([xs, np.zeros(5), np.zeros(5)], axis=1)
    actor = _Track(past=past, box=OrientedBox(0.0, 0.0, 4.5, 1.9, 0.0), speed=4.0)
    ctx = extract_features(g, actor)
    vec = ctx.to_vector()
    assert vec.shape == (34,)
    assert ctx.speed == 4.0
    assert ctx.heading_rate == 0.0
    assert np.allclose(ctx.past_xy[-1], [0.0, 0.0])
    assert np.allclose(ctx.past_xy[0], [-8.0, 0.0])
    # Lookahead marches down the lane at 5 m spacing in the actor frame.
    assert np.allclose(ctx.lookahead[:, 0], 5.0 * np.arange(1, 11), atol=1e-6)
    assert np.allclose(ctx.lookahead[:, 1], 0.0, atol=1e-9)
    assert ctx.red_light_ahead == 0.0
    assert ctx.intersection_distance == 60.0


def test_extract_features_off_map():
    g = _straight_graph()
    past = np.stack([np.linspace(-4, 0, 5), np.full(5, 500.0), np.zeros(5)], axis=1)
    actor = _Track(past=past, box=OrientedBox(0.0, 500.0, 4.5, 1.9, 0.0), speed=2.0)
    ctx = extract_features(g, actor)
    assert np.all(ctx.lookahead == 0.0)
    assert ctx.red_light_ahead == 0.0
    assert ctx.intersection_distance == 60.0


def test_extract_features_bad_past():
    g = _straight_graph()
    actor = _Track(past=np.zeros((4, 3)), box=OrientedBox(0, 0, 4, 2, 0), speed=0.0)
    with pytest.raises(ShapeMismatch):
        extract_features(g, actor)
