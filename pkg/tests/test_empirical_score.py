import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoscore.core import Dataset, NoiseSchedule
from geoscore.empirical_score import (evaluate, kde_log_density, log_density, lse,
                                      responsibilities, score, score_divergence)
from geoscore.errors import DomainError

from conftest import ou_at

LOG_2PI = math.log(2 * math.pi)


def mp_log_density(points, sigma, x):
    """Mixture log-density summed directly in 40-digit arithmetic."""
    with mpmath.workdps(40):
        d = len(x)
        s2 = mpmath.mpf(sigma) ** 2
        total = mpmath.mpf(0)
        for p in points:
            r2 = sum((mpmath.mpf(xi) - mpmath.mpf(pi)) ** 2 for xi, pi in zip(x, p))
            total += mpmath.exp(-r2 / (2 * s2))
        return mpmath.log(total / len(points)) - mpmath.mpf(d) / 2 * mpmath.log(2 * mpmath.pi * s2)


def mp_derivatives(points, sigma, x):
    """Gradient and Laplacian of the mixture log-density by high-precision differencing."""
    with mpmath.workdps(40):
        x = [mpmath.mpf(v) for v in x]
        grad, lap = [], mpmath.mpf(0)
        h = mpmath.mpf(10) ** -12
        f0 = mp_log_density(points, sigma, x)
        for j in range(len(x)):
            xp, xm = list(x), list(x)
            xp[j] += h
            xm[j] -= h
            fp, fm = mp_log_density(points, sigma, xp), mp_log_density(points, sigma, xm)
            grad.append((fp - fm) / (2 * h))
            lap += (fp - 2 * f0 + fm) / (h * h)
        return np.array([float(g) for g in grad]), float(lap)


def test_lse_small_cases():
    assert lse([0.0]) == 0.0
    assert lse([0.0, 0.0]) == pytest.approx(0.693147180559945, abs=1e-15)
    with pytest.raises(DomainError):
        lse([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(-1e6, 1e6))
def test_lse_shift_invariance(values, c):
    v = np.array(values)
    assert lse(v + c) == pytest.approx(lse(v) + c, abs=1e-12 * (1 + abs(c) + np.max(np.abs(v))))


def test_lse_extreme_inputs():
    v = np.array([-1e6, 1e6, 0.0, 1e6])
    assert lse(v) == pytest.approx(1e6 + math.log(2), rel=1e-15)
    assert np.isfinite(lse(np.array([-1e6, -1e6])))


def test_single_gaussian_values():
    ds = Dataset([[0.0]])
    sched, t = ou_at(1.0)
    assert log_density(ds, sched, t, [0.0]) == pytest.approx(-0.5 * LOG_2PI, abs=1e-14)
    assert log_density(ds, sched, t, [2.0]) == pytest.approx(-2 - 0.5 * LOG_2PI, abs=1e-14)
    assert score(ds, sched, t, [2.0])[0] == pytest.approx(-2.0, abs=1e-14)


def test_symmetric_pair_score_zero():
    ds = Dataset([[-1.0], [1.0]])
    sched, t = ou_at(0.7)
    assert score(ds, sched, t, [0.0])[0] == pytest.approx(0.0, abs=1e-15)


def test_single_gaussian_laplacian():
    ds = Dataset([[0.3, -0.2]])
    sched, t = ou_at(1.0)
    assert score_divergence(ds, sched, t, [1.0, 2.0]) == pytest.approx(-2.0, abs=1e-12)


def test_two_point_mixture_extended_precision():
    pts = [[0.2, -0.4], [1.1, 0.9]]
    ds = Dataset(pts)
    sched, t = ou_at(0.6)
    x = [0.5, 0.1]
    assert log_density(ds, sched, t, x) == pytest.approx(float(mp_log_density(pts, 0.6, x)),
                                                         abs=1e-13)


def test_midpoint_laplacian_above_single_mode():
    ds = Dataset([[-1.0, 0.0], [1.0, 0.0]])
    sigma = 0.8
    sched, t = ou_at(sigma)
    lap = score_divergence(ds, sched, t, [0.0, 0.0])
    _, oracle = mp_derivatives(ds.points, sigma, [0.0, 0.0])
    assert lap == pytest.approx(oracle, rel=1e-5)
    assert lap > -2 / sigma ** 2


def _instances(count, seed=0):
    g = np.random.default_rng(seed)
    out = []
    for k in range(count):
        d = (1, 2, 8)[k % 3]
        n = (1, 5, 50)[(k // 3) % 3]
        sigma = float(g.uniform(0.3, 1.5))
        pts = g.normal(size=(n, d))
        x = g.normal(size=d) * 0.8
        out.append((pts, sigma, x))
    return out


@pytest.mark.parametrize("pts,sigma,x", _instances(100))
def test_score_and_laplacian_against_oracle(pts, sigma, x):
    ds = Dataset(pts)
    sched, t = ou_at(sigma)
    ev = evaluate(ds, sched, t, x)
    grad, lap = mp_derivatives(pts, sigma, x)
    assert np.linalg.norm(ev.score - grad) <= 1e-6 * max(np.linalg.norm(grad), 1e-3)
    assert abs(ev.laplacian - lap) <= 1e-5 * max(abs(lap), 1e-3)
    assert float(ev.log_density) == pytest.approx(float(mp_log_density(pts, sigma, x)), abs=1e-12)


def test_float_finite_difference_gradient():
    # plain double-precision differences at the recommended step
    g = np.random.default_rng(3)
    for _ in range(20):
        pts = g.normal(size=(5, 2))
        x = g.normal(size=2)
        sched, t = ou_at(0.9)
        ds = Dataset(pts)
        h = 1e-5 * (1 + np.linalg.norm(x))
        fd = np.array([(log_density(ds, sched, t, x + h * e) - log_density(ds, sched, t, x - h * e))
                       / (2 * h) for e in np.eye(2)])
        s = score(ds, sched, t, x)
        assert np.linalg.norm(s - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_score_formula_from_responsibilities():
    g = np.random.default_rng(4)
    pts = g.normal(size=(7, 3))
    sched = NoiseSchedule.ou(0.7, 2.0)
    t = 0.4
    mu, sigma = sched.mu_sigma(t)
    x = g.normal(size=3)
    ev = evaluate(Dataset(pts), sched, t, x)
    w = ev.responsibilities
    assert np.sum(w) == pytest.approx(1.0, abs=1e-12)
    assert np.all(w >= 0)
    np.testing.assert_allclose(ev.score, (w @ (mu * pts) - x) / sigma ** 2, atol=1e-12)


def test_permutation_behaviour():
    g = np.random.default_rng(5)
    pts = g.normal(size=(9, 2))
    perm = g.permutation(9)
    sched, t = ou_at(0.5)
    x = g.normal(size=(4, 2))
    a, b = Dataset(pts), Dataset(pts[perm])
    np.testing.assert_allclose(log_density(a, sched, t, x), log_density(b, sched, t, x),
                               atol=1e-13)
    np.testing.assert_allclose(responsibilities(a, sched, t, x)[:, perm],
                               responsibilities(b, sched, t, x), atol=1e-15)


def test_batch_matches_single():
    g = np.random.default_rng(6)
    ds = Dataset(g.normal(size=(11, 3)))
    sched, t = ou_at(0.4)
    xs = g.normal(size=(6, 3))
    batch = evaluate(ds, sched, t, xs)
    for i, x in enumerate(xs):
        one = evaluate(ds, sched, t, x)
        assert float(one.log_density) == pytest.approx(batch.log_density[i], abs=1e-13)
        np.testing.assert_allclose(one.score, batch.score[i], atol=1e-12)


def test_stability_tiny_sigma_far_point():
    g = np.random.default_rng(7)
    ds = Dataset(g.normal(size=(20, 4)))
    sched, t = ou_at(1e-8)
    for x in (ds.points[0] + 1e-9, ds.points[0] + 1e3, np.full(4, -1e3)):
        ev = evaluate(ds, sched, t, x)
        assert np.isfinite(ev.log_density)
        assert np.all(np.isfinite(ev.score))
        assert np.isfinite(ev.laplacian)
        assert np.all(np.isfinite(ev.responsibilities))


def test_far_point_single_gaussian_exact():
    ds = Dataset([[0.0, 0.0]])
    sched, t = ou_at(1e-4)
    x = np.array([1e3, 0.0])
    expected = -0.5 * 1e6 / 1e-8 - math.log(2 * math.pi * 1e-8)
    assert log_density(ds, sched, t, x) == pytest.approx(expected, rel=1e-14)


def test_dimension_mismatch():
    ds = Dataset([[0.0, 0.0]])
    sched, t = ou_at(1.0)
    with pytest.raises(DomainError):
        score(ds, sched, t, [0.0, 0.0, 0.0])


def test_kde_log_density_matches_mixture():
    pts = [[0.0, 0.0], [1.0, 0.5]]
    x = [0.3, 0.2]
    assert kde_log_density(Dataset(pts), 0.4, x) == pytest.approx(
        float(mp_log_density(pts, 0.4, x)), abs=1e-13)
    combined = math.sqrt(0.4 ** 2 + 0.3 ** 2)
    assert kde_log_density(Dataset(pts), 0.4, x, noise_var=0.09) == pytest.approx(
        float(mp_log_density(pts, combined, x)), abs=1e-13)
    with pytest.raises(DomainError):
        kde_log_density(Dataset(pts), 0.0, x)


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(1, 4), st.floats(0.05, 3.0), st.integers(0, 2**31))
def test_responsibilities_normalised(n, d, sigma, seed):
    g = np.random.default_rng(seed)
    ds = Dataset(g.normal(size=(n, d)) * 3)
    sched, t = ou_at(sigma)
    w = responsibilities(ds, sched, t, g.normal(size=(5, d)) * 3)
    np.testing.assert_allclose(np.sum(w, axis=1), 1.0, atol=1e-12)
