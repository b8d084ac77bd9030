import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoscore.analysis import (EmpiricalDensity, Grid, GridDensity, KDEDensity, RenyiOrder,
                               affine_residual, anisotropy, density_ratio, dist_to_set, eval_grid,
                               gaussian_renyi, lateral_details, lateral_distance, load_grid_density,
                               log_tail_slope, nll, renyi, renyi_details, save_grid_density,
                               tail_probability, tangent_stencil, theta_histogram,
                               write_metrics_csv)
from geoscore.core import Dataset, DiffusionConfig, NoiseSchedule, circle_dataset
from geoscore.errors import ConfigError, DomainError, NumericalError
from geoscore.kernels import FixedStencil, IsotropicGaussian, LevelSetAdapted
from geoscore.manifolds import Affine, BumpCurve, Circle, bump_image
from geoscore.smoothing import SmoothedScoreModel

from conftest import ou_at


def line_setup(n=5):
    a = np.array([[1.0, -1.0]]) / math.sqrt(2)
    m = Affine(a, [0.3], patch=[(-1.5, 1.5)])
    return Dataset(m.sample_uniform(n, None, equispaced=True)), m


# -- grids -------------------------------------------------------------------


def test_grid_validation():
    with pytest.raises(ConfigError):
        Grid(((1.0, 0.0),), (10,))
    with pytest.raises(ConfigError):
        Grid.square(-1, 1, 10, dim=4)
    with pytest.raises(ConfigError):
        Grid.square(-1, 1, 4096, dim=2)
    g = Grid.square(-1, 1, 5, dim=2)
    assert g.points().shape == (25, 2)
    assert np.sum(g.weights()) == pytest.approx(4.0, rel=1e-14)


def test_single_gaussian_grid_mass():
    ds = Dataset([[0.0]])
    sched, t = ou_at(1.0)
    gd = eval_grid(EmpiricalDensity(ds, sched), t, Grid(((-6.0, 6.0),), (4096,)))
    assert math.exp(gd.log_norm) == pytest.approx(1.0, abs=1e-6)
    assert gd.mass() == pytest.approx(1.0, abs=1e-10)


def test_kde_grid_mass():
    ds = circle_dataset(12)
    gd = eval_grid(KDEDensity(ds, 0.2), 0.1, Grid.square(-2.5, 2.5, 256))
    assert math.exp(gd.log_norm) == pytest.approx(1.0, abs=1e-3)


def test_grid_dimension_mismatch():
    with pytest.raises(DomainError):
        eval_grid(KDEDensity(circle_dataset(4), 0.2), 0.1, Grid.square(-1, 1, 8, dim=1))


# -- Renyi -------------------------------------------------------------------


def gaussian_grid(mean, var=1.0, lo=-12.0, hi=12.0, n=4001):
    grid = Grid(((lo, hi),), (n,))
    return GridDensity.from_log_values(grid, -(grid.points()[:, 0] - mean) ** 2 / (2 * var))


def test_renyi_self_zero():
    p = gaussian_grid(0.3)
    for q in (1.0, 1.5, 2.0, 5.0):
        assert renyi(p, p, q) == pytest.approx(0.0, abs=1e-12)


def test_renyi_gaussian_pair():
    p, q = gaussian_grid(0.0), gaussian_grid(0.5)
    assert renyi(p, q, 2.0) == pytest.approx(gaussian_renyi([0.0], [0.5], 1.0, 2.0), abs=1e-4)
    assert renyi(p, q, 1.0) == pytest.approx(0.125, abs=1e-4)


def test_renyi_monotone_in_order():
    p, q = gaussian_grid(0.0, 1.0), gaussian_grid(0.7, 1.5)
    vals = [renyi(p, q, order) for order in (1.0, 1.5, 2.0)]
    assert vals[0] <= vals[1] <= vals[2]


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_renyi_nonnegative_and_monotone(seed, q):
    g = np.random.default_rng(seed)
    grid = Grid.square(-1, 1, 16, dim=2)
    p = GridDensity.from_log_values(grid, g.normal(scale=2, size=grid.size))
    r = GridDensity.from_log_values(grid, g.normal(scale=2, size=grid.size))
    assert renyi(p, r, q) >= 0
    assert renyi(p, r, q) <= renyi(p, r, q + 0.5) + 1e-12


def test_renyi_floor_counted():
    grid = Grid(((-1.0, 1.0),), (5,))
    p = GridDensity.from_log_values(grid, np.zeros(5))
    q = GridDensity.from_log_values(grid, [0.0, 0.0, 0.0, 0.0, -1e4])
    res = renyi_details(p, q, RenyiOrder(2.0))
    assert res.floored_cells == 1
    assert np.isfinite(res.value)
    with pytest.raises(DomainError):
        RenyiOrder(0.5)
    with pytest.raises(DomainError):
        renyi(p, gaussian_grid(0.0), 2.0)


# -- affine exactness ----------------------------------------------------------


def test_affine_line_residual():
    ds, m = line_setup()
    sched = NoiseSchedule.ve_for_dataset(ds)
    res = affine_residual(ds, m, FixedStencil(0.1), 0.01, Grid.square(-2, 2, 64), sched)
    assert res < 1e-8


def test_affine_tangent_kernel_identical():
    ds, m = line_setup()
    sched = NoiseSchedule.ve_for_dataset(ds)
    k = FixedStencil(0.1, directions=np.array([[1.0, 1.0]]) / math.sqrt(2))
    assert affine_residual(ds, m, k, 0.01, Grid.square(-2, 2, 64), sched) < 1e-12


def test_curved_manifold_breaks_equality():
    # the same construction on a circle: the level-set kernel built on the stencil
    ds = circle_dataset(5)
    sched = NoiseSchedule.ve_for_dataset(ds)
    stencil = FixedStencil(0.1)
    grid = Grid.square(-2, 2, 64)
    pts = grid.points()
    full = SmoothedScoreModel(ds, sched, stencil, mode="quadrature").log_density(0.01, pts)
    adapted = SmoothedScoreModel(ds, sched, LevelSetAdapted(stencil, Circle()))
    offsets = stencil.offsets(2)
    diff = full - adapted.log_density(0.01, pts, noise=offsets)
    assert np.max(np.abs(diff - diff.mean())) > 1e-3


@settings(max_examples=30)
@given(st.integers(2, 3), st.data(), st.floats(0.01, 0.5), st.floats(0.01, 1.0),
       st.integers(0, 2**31))
def test_affine_residual_property(d, data, h, frac, seed):
    codim = data.draw(st.integers(1, d - 1))
    g = np.random.default_rng(seed)
    q, _ = np.linalg.qr(g.normal(size=(d, d)))
    a = q[:codim]
    b = g.normal(size=codim) * 0.3
    m = Affine(a, b, patch=[(-1.0, 1.0)] * (d - codim))
    ds = Dataset(m.sample_uniform(4, g))
    sched = NoiseSchedule.ve_for_dataset(ds)
    eps = 1e-3 + frac * (sched.T - 1e-3)
    grid = Grid.square(-1.5, 1.5, 12 if d == 3 else 24, dim=d)
    assert affine_residual(ds, m, FixedStencil(h), eps, grid, sched) < 1e-8


def test_affine_residual_preconditions():
    ds, m = line_setup()
    sched = NoiseSchedule.ve_for_dataset(ds)
    grid = Grid.square(-1, 1, 8)
    with pytest.raises(DomainError):
        affine_residual(Dataset(ds.points + [0.01, 0.0]), m, FixedStencil(0.1), 0.01, grid, sched)
    with pytest.raises(DomainError):
        affine_residual(ds, Circle(), FixedStencil(0.1), 0.01, grid, sched)
    t = tangent_stencil(FixedStencil(0.2), m)
    np.testing.assert_allclose(m.A @ t.directions.T, 0.0, atol=1e-15)


# -- distances and tails ---------------------------------------------------------


def test_distance_examples():
    ds = circle_dataset(4)
    m = Circle()
    assert dist_to_set(ds.points[1], ds.points) == 0.0
    assert lateral_distance(ds.points[1], ds, m) == 0.0
    mid = np.array([math.cos(math.pi / 4), math.sin(math.pi / 4)])
    assert lateral_distance(mid, ds, m) == pytest.approx(dist_to_set(mid, ds.points), abs=1e-12)
    with pytest.raises(DomainError):
        dist_to_set(mid, np.zeros((0, 2)))


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_lateral_identity(x0, x1):
    ds = circle_dataset(12)
    x = np.array([[x0, x1]])
    res = lateral_details(x, ds, Circle())
    dd, dm = dist_to_set(x, ds.points)[0], Circle().distance(x)[0]
    if not res.clamped[0]:
        assert res.value[0] ** 2 + dm ** 2 == pytest.approx(dd ** 2, rel=1e-9, abs=1e-12)
    else:
        assert res.value[0] == 0.0


def test_tail_examples():
    m = Circle()
    x = np.random.default_rng(0).normal(size=(100, 2))
    assert tail_probability(x, m, 0.0) == 1.0
    on = m.sample_uniform(100, np.random.default_rng(1))
    assert tail_probability(on, m, 1e-9) == 0.0
    with pytest.raises(DomainError):
        tail_probability(x, m, -1.0)
    with pytest.raises(NumericalError):
        log_tail_slope(on, m, [0.1, 0.2])


@given(st.lists(st.floats(0, 3), min_size=2, max_size=8))
def test_tail_monotone(radii):
    x = np.random.default_rng(2).normal(size=(300, 2))
    radii = sorted(radii)
    tails = [tail_probability(x, Circle(), r) for r in radii]
    assert all(a >= b for a, b in zip(tails, tails[1:]))


# -- likelihood and density ratio --------------------------------------------------


def test_nll_single_gaussian():
    x1 = np.array([0.2, 0.1])
    sched = NoiseSchedule.ou(1.0, 10.0)
    model = SmoothedScoreModel(Dataset([x1]), sched)
    cfg = DiffusionConfig(sched, n_steps=400, epsilon=0.02, time_grid="log")
    mu, sig = sched.mu_sigma(0.02)
    assert nll(model, cfg, mu * x1) == pytest.approx(math.log(2 * math.pi * sig ** 2), abs=1e-2)


def test_nll_memorization_extreme():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    cfg = DiffusionConfig(sched, n_steps=60)
    smooth = SmoothedScoreModel(ds, sched, IsotropicGaussian(0.1), n_samples=100)
    raw = SmoothedScoreModel(ds, sched)
    pts = ds.points[:4]
    assert nll(raw, cfg, pts) < nll(smooth, cfg, pts, rng=0)


def test_density_ratio_grows_with_smoothing():
    ds = circle_dataset(12)
    sched = NoiseSchedule.ve_for_dataset(ds)
    theta = np.pi / 12 + 2 * np.pi * np.arange(12) / 12
    mids = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    g = np.random.default_rng(3)
    z = g.standard_normal((500, 2))
    lows = [np.min(density_ratio(SmoothedScoreModel(ds, sched, IsotropicGaussian(s), n_samples=500),
                                 0.01, mids, ds, noise=s * z)) for s in (0.05, 0.1, 0.2)]
    assert lows[0] < lows[1] < lows[2]


# -- images --------------------------------------------------------------------


def test_anisotropy_bump_near_one():
    m = BumpCurve(0.2, 64)
    # diagonal placement keeps the bump furthest from the image edges
    assert anisotropy(bump_image(m, np.pi / 4)) == pytest.approx(1.0, abs=1e-2)
    # elsewhere the thresholded disk picks up pixel-grid asymmetry of about 1%
    for theta in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        assert 1.0 <= anisotropy(bump_image(m, theta)) < 1.02


def test_anisotropy_stretched():
    u = np.linspace(-1, 1, 128)
    uu, vv = np.meshgrid(u, u)
    img = np.exp(-((uu / 0.2) ** 2 + (vv / 0.1) ** 2) / 2)
    assert anisotropy(img) == pytest.approx(4.0, rel=0.05)
    with pytest.raises(DomainError):
        anisotropy(np.zeros(16))
    with pytest.raises(DomainError):
        anisotropy(np.ones(15))


def test_theta_histogram_training_bins():
    m = BumpCurve(0.2, 16)
    pts = m.sample_uniform(16, None, equispaced=True)
    counts, _ = theta_histogram(pts + 1e-9, m, bins=64)
    assert np.count_nonzero(counts) == 16 and counts.sum() == 16
    with pytest.raises(DomainError):
        theta_histogram(pts, Affine([[1.0] + [0.0] * 255]))


# -- export --------------------------------------------------------------------


def test_grid_density_round_trip(tmp_path):
    gd = eval_grid(KDEDensity(circle_dataset(6), 0.3), 0.1, Grid.square(-2, 2, 17))
    back = load_grid_density(save_grid_density(gd, tmp_path / "g.bin"))
    assert back.log_values.tobytes() == gd.log_values.tobytes()
    assert back.log_norm == gd.log_norm
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(DomainError):
        load_grid_density(tmp_path / "bad.bin")


def test_metrics_csv(tmp_path):
    rows = [{"sigma": 0.1, "nll": 1.25, "extra": "a"}, {"sigma": 0.2, "d2_renyi": 1 / 3}]
    text = write_metrics_csv(rows, tmp_path / "m.csv", extra=["extra"]).read_text()
    lines = text.splitlines()
    assert lines[0] == ("sigma,dist_to_data_mean,dist_to_manifold_mean,lateral_mean,nll,"
                        "anisotropy_mean,d2_renyi,extra")
    assert lines[1] == "0.1,,,,1.25,,,a"
    assert float(lines[2].split(",")[6]) == 1 / 3
