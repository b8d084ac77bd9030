import math

import numpy as np
import pytest

from geoscore.analysis import dist_to_set
from geoscore.core import Dataset, DiffusionConfig, NoiseSchedule, circle_dataset
from geoscore.errors import CapabilityError, DomainError, NumericalError
from geoscore.kernels import FixedStencil, IsotropicGaussian, LevelSetAdapted
from geoscore.manifolds import Circle
from geoscore.rng import RngSeed
from geoscore.sampler import (Trajectory, kde_sample, langevin_corrector, pf_log_likelihood,
                              pf_ode_solve, reverse_sde_sample)
from geoscore.smoothing import SmoothedScoreModel

X1 = np.array([0.5, -0.3])


def single_point(schedule):
    return SmoothedScoreModel(Dataset([X1]), schedule)


def ks_normal(x, mean, std):
    """Kolmogorov-Smirnov distance of a 1-D sample to N(mean, std^2)."""
    x = np.sort(x)
    cdf = 0.5 * (1 + np.vectorize(math.erf)((x - mean) / (std * math.sqrt(2))))
    n = len(x)
    return max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))


def test_single_point_gaussian_target():
    sched = NoiseSchedule.ou(0.0, 1.0)
    cfg = DiffusionConfig(sched, n_steps=200, epsilon=1e-3, time_grid="log")
    n = 2000
    y = reverse_sde_sample(single_point(sched), cfg, n, 0)
    mu, sig = sched.mu_sigma(1e-3)
    assert np.all(np.abs(y.mean(axis=0) - mu * X1) <= 3 * sig / math.sqrt(n))
    assert np.all(np.abs(y.std(axis=0) - sig) <= 3 * sig / math.sqrt(2 * n))


def test_zero_steps_returns_prior():
    sched = NoiseSchedule.ou(1.0, 4.0)
    cfg = DiffusionConfig(sched, n_steps=0)
    y = reverse_sde_sample(single_point(sched), cfg, 5, 3)
    root = RngSeed(3)
    expect = [sched.prior_std() * root.child("sde", c).generator().standard_normal(2)
              for c in range(5)]
    np.testing.assert_array_equal(y, np.stack(expect))


def test_memorization_without_smoothing():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    y = reverse_sde_sample(SmoothedScoreModel(ds, sched), DiffusionConfig(sched), 200, 1)
    assert np.all(dist_to_set(y, ds.points) < 0.05)


def test_worker_count_and_block_invariance():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    model = SmoothedScoreModel(ds, sched, IsotropicGaussian(0.1), n_samples=20)
    cfg = DiffusionConfig(sched, n_steps=10)
    a = reverse_sde_sample(model, cfg, 30, 7, workers=1, block=8)
    b = reverse_sde_sample(model, cfg, 30, 7, workers=4, block=8)
    c = reverse_sde_sample(model, cfg, 30, 7, workers=3, block=5)
    assert a.tobytes() == b.tobytes() == c.tobytes()
    # each chain owns its stream, so prefixes agree
    assert reverse_sde_sample(model, cfg, 4, 7).tobytes() == a[:4].tobytes()
    tail = reverse_sde_sample(model, cfg, 5, 7, chain_start=25)
    assert tail.tobytes() == a[25:].tobytes()


def test_corrector_worker_invariance():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    model = SmoothedScoreModel(ds, sched)
    cfg = DiffusionConfig(sched, n_steps=5, corrector_steps=2)
    a = reverse_sde_sample(model, cfg, 20, 2, workers=1, block=6)
    b = reverse_sde_sample(model, cfg, 20, 2, workers=3, block=6)
    assert a.tobytes() == b.tobytes()


def test_trajectory_ends_at_epsilon():
    sched = NoiseSchedule.ou(1.0, 2.0)
    cfg = DiffusionConfig(sched, n_steps=7, epsilon=0.013)
    traj = reverse_sde_sample(single_point(sched), cfg, 3, 0, return_trajectory=True)
    assert traj.times[-1] == 0.013 and traj.times[0] == 2.0
    assert traj.states.shape == (8, 3, 2)
    with pytest.raises(DomainError):
        Trajectory(np.array([1.0, 0.5, 0.7]), np.zeros((3, 2)))


def test_nonfinite_state_aborts():
    sched = NoiseSchedule.ou(0.0, 1.0)
    model = single_point(sched)
    model.score = lambda t, x, noise=None, rng=None: np.full_like(x, np.nan)
    with pytest.raises(NumericalError, match="step 0"):
        reverse_sde_sample(model, DiffusionConfig(sched, n_steps=3), 2, 0)


def test_corrector_identity_cases():
    sched = NoiseSchedule.ou(0.0, 1.0)
    m = single_point(sched)
    x = np.array([[0.1, 0.2], [1.0, 1.0]])
    g = np.random.default_rng(0)
    np.testing.assert_array_equal(langevin_corrector(m, 0.5, x, 0, 0.16, g), x)
    np.testing.assert_array_equal(langevin_corrector(m, 0.5, x, 5, 0.0, g), x)
    with pytest.raises(DomainError):
        langevin_corrector(m, 0.5, x, -1, 0.16, g)


def test_corrector_skips_zero_score():
    sched = NoiseSchedule.ou(0.0, 1.0)
    m = single_point(sched)
    out = langevin_corrector(m, 0.5, X1.copy(), 3, 0.16, np.random.default_rng(1))
    np.testing.assert_array_equal(out, X1)


def test_corrector_approaches_stationary_law():
    ds = Dataset([[0.4]])
    sched = NoiseSchedule.ou(0.0, 1.0)
    m = SmoothedScoreModel(ds, sched)
    t = 0.5  # sigma_t = 1
    g = np.random.default_rng(2)
    x0 = 2.0 + 0.3 * g.standard_normal((4000, 1))
    dists = [ks_normal(langevin_corrector(m, t, x0, k, 0.3, g)[:, 0], 0.4, 1.0)
             for k in (0, 10, 200)]
    assert dists[0] > dists[1] > dists[2]
    assert dists[2] < 0.03


def test_corrector_reduces_distance_to_data():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    m = SmoothedScoreModel(ds, sched)
    med = {c: [np.median(dist_to_set(reverse_sde_sample(
        m, DiffusionConfig(sched, n_steps=25, corrector_steps=c), 400, seed), ds.points))
        for seed in range(3)] for c in (0, 3)}
    assert np.median(med[3]) < np.median(med[0])


def test_pf_single_gaussian_likelihood():
    sched = NoiseSchedule.ou(1.0, 10.0)
    cfg = DiffusionConfig(sched, n_steps=400, epsilon=1e-2, time_grid="log")
    mu, sig = sched.mu_sigma(1e-2)
    ll = pf_log_likelihood(single_point(sched), cfg, mu * X1)
    assert float(ll[0]) == pytest.approx(-math.log(2 * math.pi * sig ** 2), abs=1e-2)
    fine = pf_log_likelihood(single_point(sched), DiffusionConfig(
        sched, n_steps=800, epsilon=1e-2, time_grid="log"), mu * X1)
    assert abs(float(fine[0]) - float(ll[0])) <= 1e-3


def test_pf_zero_length():
    sched = NoiseSchedule.ou(1.0, 1.0)
    traj = pf_ode_solve(single_point(sched), DiffusionConfig(sched, n_steps=0), X1)
    np.testing.assert_array_equal(traj.final, X1)
    assert traj.log_det_accum == 0.0


@pytest.mark.parametrize("kernel,mode", [(None, "monte_carlo"), (IsotropicGaussian(0.1), "monte_carlo"),
                                         (FixedStencil(0.1), "quadrature")])
def test_pf_round_trip(kernel, mode):
    ds = circle_dataset(6)
    sched = NoiseSchedule.ou(1.0, 2.0)
    model = SmoothedScoreModel(ds, sched, kernel, n_samples=50, mode=mode)
    cfg = DiffusionConfig(sched, n_steps=400, epsilon=0.05)
    x = np.array([[1.2, 0.1], [-0.3, 0.4]])
    noise = None if model.deterministic else model.draw_noise_batch(
        [np.random.default_rng(i) for i in range(2)])
    fwd = pf_ode_solve(model, cfg, x, "forward", noise=noise)
    back = pf_ode_solve(model, cfg, fwd.final, "reverse", noise=noise)
    np.testing.assert_allclose(back.final, x, atol=1e-3)
    np.testing.assert_allclose(back.log_det_accum, -fwd.log_det_accum, atol=1e-3)


def test_pf_rejects_adapted_kernel():
    sched = NoiseSchedule.ou(1.0, 1.0)
    m = SmoothedScoreModel(circle_dataset(4), sched, LevelSetAdapted(IsotropicGaussian(0.1), Circle()))
    with pytest.raises(CapabilityError):
        pf_ode_solve(m, DiffusionConfig(sched, n_steps=2), X1, rng=0)
    with pytest.raises(DomainError):
        pf_ode_solve(single_point(sched), DiffusionConfig(sched, n_steps=2), X1, "sideways")


def test_kde_moments():
    ds = circle_dataset(12)
    sigma, n = 0.2, 100_000
    y = kde_sample(ds, sigma, n, 5)
    mean, var = ds.points.mean(axis=0), ds.points.var(axis=0) + sigma ** 2
    assert np.all(np.abs(y.mean(axis=0) - mean) <= 4 * np.sqrt(var / n))
    # variance of a sample variance is about 2 var^2 / n for near-Gaussian tails
    assert np.all(np.abs(y.var(axis=0) - var) <= 4 * np.sqrt(3 * var ** 2 / n))


def test_kde_zero_bandwidth_returns_training_points():
    ds = circle_dataset(12)
    y = kde_sample(ds, 0.0, 50, 6)
    assert np.all(dist_to_set(y, ds.points) == 0.0)
    with pytest.raises(DomainError):
        kde_sample(ds, -0.1, 5, 0)
