"""Grid densities, divergences and sample metrics."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import Dataset, DiffusionConfig, NoiseSchedule
from .empirical_score import evaluate_raw, lse
from .errors import ConfigError, DomainError, NumericalError
from .kernels import FixedStencil
from .manifolds import Affine, Curve, Manifold
from .smoothing import SmoothedScoreModel

GRID_CELL_CAP = 1 << 22
RENYI_FLOOR = 1e-300
ANISOTROPY_THRESHOLD = 0.1
METRIC_COLUMNS = ("sigma", "dist_to_data_mean", "dist_to_manifold_mean", "lateral_mean",
                  "nll", "anisotropy_mean", "d2_renyi")

_GRID_MAGIC = b"GSGRID01"
_EVAL_CHUNK = 1 << 19


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Tensor grid of nodes ``linspace(lo, hi, resolution)`` per axis (d <= 3)."""

    bounds: tuple
    resolution: tuple
    cap: int = GRID_CELL_CAP

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        res = tuple(int(r) for r in np.broadcast_to(self.resolution, (len(bounds),)))
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "resolution", res)
        if not 1 <= len(bounds) <= 3:
            raise ConfigError("grids support 1 to 3 dimensions")
        if any(not lo < hi for lo, hi in bounds):
            raise ConfigError("grid bounds need lo < hi on every axis")
        if any(r < 2 for r in res):
            raise ConfigError("grid resolution must be >= 2 per axis")
        if math.prod(res) > self.cap:
            raise ConfigError(f"grid has {math.prod(res)} cells, above the cap {self.cap}")

    @classmethod
    def square(cls, lo: float, hi: float, resolution: int, dim: int = 2) -> "Grid":
        return cls(((lo, hi),) * dim, (resolution,) * dim)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def size(self) -> int:
        return math.prod(self.resolution)

    def axes(self) -> list:
        return [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.bounds, self.resolution)]

    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (r - 1) for (lo, hi), r in zip(self.bounds, self.resolution)])

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights per node, shaped like the grid."""
        w = np.ones(())
        for h, r in zip(self.spacing(), self.resolution):
            w1 = np.full(r, h)
            w1[0] = w1[-1] = 0.5 * h
            w = np.multiply.outer(w, w1)
        return w

    def same_as(self, other: "Grid") -> bool:
        return self.bounds == other.bounds and self.resolution == other.resolution

    def to_dict(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "resolution": list(self.resolution)}


@dataclass
class GridDensity:
    """Log-density values on a grid with ``sum(w * exp(log_values - log_norm)) == 1``.

    ``w`` are the trapezoid weights of the grid.
    """

    grid: Grid
    log_values: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        self.log_values = np.asarray(self.log_values, dtype=np.float64).reshape(self.grid.shape)

    @classmethod
    def from_log_values(cls, grid: Grid, log_values) -> "GridDensity":
        out = cls(grid, log_values)
        out.normalize()
        return out

    def normalize(self) -> "GridDensity":
        if not np.any(np.isfinite(self.log_values)):
            raise NumericalError("density has no finite values on the grid")
        self.log_norm = lse((self.log_values + np.log(self.grid.weights())).ravel())
        return self

    @property
    def log_density(self) -> np.ndarray:
        return self.log_values - self.log_norm

    def mass(self) -> float:
        return float(np.sum(self.grid.weights() * np.exp(self.log_density)))


class EmpiricalDensity:
    """The noised empirical density ``log p_eps`` as a grid source."""

    def __init__(self, dataset: Dataset, schedule: NoiseSchedule):
        self.dataset, self.schedule = dataset, schedule


class KDEDensity:
    """Gaussian KDE with bandwidth ``sigma`` (plus optional extra variance)."""

    def __init__(self, dataset: Dataset, sigma: float, noise_var: float = 0.0):
        if not sigma * sigma + noise_var > 0:
            raise DomainError("KDE bandwidth must be positive")
        self.dataset, self.sigma, self.noise_var = dataset, float(sigma), float(noise_var)


def _grid_log_values(source, epsilon, pts, rng, noise):
    if isinstance(source, SmoothedScoreModel):
        if noise is None and not source.deterministic:
            if rng is None:
                raise DomainError("Monte Carlo smoothing needs an rng or noise")
            # one noise set shared by every cell (common random numbers)
            noise = source.draw_noise(rng)
        per = max(1, _EVAL_CHUNK // max(1, source.n_samples))
        return np.concatenate([source.log_density(epsilon, pts[i:i + per], noise=noise)
                               for i in range(0, len(pts), per)])
    if isinstance(source, EmpiricalDensity):
        mu, sigma = source.schedule.mu_sigma(epsilon)
        return evaluate_raw(source.dataset.points, mu, sigma, pts, ("log_density",))["log_density"]
    if isinstance(source, KDEDensity):
        scale = math.sqrt(source.sigma ** 2 + source.noise_var)
        return evaluate_raw(source.dataset.points, 1.0, scale, pts, ("log_density",))["log_density"]
    raise DomainError(f"cannot evaluate {type(source).__name__} on a grid")


def eval_grid(source, epsilon: float, grid: Grid, rng: Optional[np.random.Generator] = None,
              noise=None) -> GridDensity:
    """Evaluate a log-density source on every grid node and normalise it."""
    dim = source.dim if isinstance(source, SmoothedScoreModel) else source.dataset.dim
    if grid.dim != dim:
        raise DomainError(f"grid dimension {grid.dim} does not match data dimension {dim}")
    vals = _grid_log_values(source, epsilon, grid.points(), rng, noise)
    return GridDensity.from_log_values(grid, vals)


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RenyiOrder:
    q: float

    def __post_init__(self):
        if not self.q >= 1:
            raise DomainError("Renyi order must be >= 1")


@dataclass(frozen=True)
class RenyiResult:
    value: float
    floored_cells: int


def renyi_details(p: GridDensity, q_density: GridDensity, order) -> RenyiResult:
    q = order.q if isinstance(order, RenyiOrder) else RenyiOrder(float(order)).q
    if not p.grid.same_as(q_density.grid):
        raise DomainError("Renyi divergence needs densities on identical grids")
    logw = np.log(p.grid.weights()).ravel()
    lp = p.log_density.ravel()
    lq = q_density.log_density.ravel()
    floor = math.log(RENYI_FLOOR)
    has_mass = lp > floor
    floored = int(np.sum(has_mass & (lq < floor)))
    lq = np.maximum(lq, floor)
    if q == 1.0:
        pw = np.exp(lp + logw)
        val = float(np.sum(np.where(pw > 0, pw * (lp - lq), 0.0)))
    else:
        val = lse(logw + q * lp + (1.0 - q) * lq) / (q - 1.0)
    return RenyiResult(max(val, 0.0), floored)


def renyi(p: GridDensity, q_density: GridDensity, order) -> float:
    """``D_q(p || q_density)``; ``q = 1`` is the KL divergence."""
    return renyi_details(p, q_density, order).value


def gaussian_renyi(mean_p, mean_q, var: float, q: float) -> float:
    """Closed form ``D_q`` between ``N(mean_p, var I)`` and ``N(mean_q, var I)``."""
    diff = np.asarray(mean_p, dtype=float) - np.asarray(mean_q, dtype=float)
    return float(q * np.sum(diff * diff) / (2.0 * var))


# ---------------------------------------------------------------------------
# Affine exactness
# ---------------------------------------------------------------------------


def tangent_stencil(kernel: FixedStencil, manifold: Affine) -> FixedStencil:
    """The stencil ``x + P xi``: each direction replaced by its tangent part."""
    dirs = np.eye(manifold.dim) if kernel.directions is None else kernel.directions
    return FixedStencil(kernel.h, dirs @ manifold.P)


def affine_residual(dataset: Dataset, manifold: Affine, kernel: FixedStencil, epsilon: float,
                    grid: Grid, schedule: NoiseSchedule) -> float:
    """Max deviation of ``log p^k - log p^{k^M}`` from its grid mean.

    Zero exactly when the two smoothed densities agree up to normalisation.
    """
    if not isinstance(manifold, Affine):
        raise DomainError("affine_residual needs an affine manifold")
    if not isinstance(kernel, FixedStencil):
        raise DomainError("affine_residual needs a stencil kernel")
    off = float(np.max(manifold.distance(dataset.points)))
    if off > 1e-9:
        raise DomainError(f"training data lies {off:.3g} off the manifold")
    pts = grid.points()
    full = SmoothedScoreModel(dataset, schedule, kernel, mode="quadrature")
    adapted = SmoothedScoreModel(dataset, schedule, tangent_stencil(kernel, manifold),
                                 mode="quadrature")
    diff = full.log_density(epsilon, pts) - adapted.log_density(epsilon, pts)
    return float(np.max(np.abs(diff - np.mean(diff))))


# ---------------------------------------------------------------------------
# Sample metrics
# ---------------------------------------------------------------------------


def dist_to_set(x, points) -> np.ndarray:
    """Euclidean distance from each row of ``x`` to the nearest row of ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] == 0 or points.size == 0:
        raise DomainError("distance to an empty set")
    x = np.asarray(x, dtype=np.float64)
    flat = np.atleast_2d(x)
    sq = np.sum(points * points, axis=1)
    chunk = max(1, (1 << 22) // points.shape[0])
    out = np.empty(flat.shape[0])
    for s in range(0, flat.shape[0], chunk):
        xb = flat[s:s + chunk]
        d2 = np.sum(xb * xb, axis=1)[:, None] - 2.0 * xb @ points.T + sq[None, :]
        j = np.argmin(d2, axis=1)
        out[s:s + chunk] = np.linalg.norm(xb - points[j], axis=1)
    return float(out[0]) if x.ndim == 1 else out


@dataclass(frozen=True)
class LateralResult:
    value: np.ndarray
    clamped: np.ndarray


def lateral_details(x, dataset, m: Manifold) -> LateralResult:
    pts = dataset.points if isinstance(dataset, Dataset) else dataset
    d_data = np.atleast_1d(dist_to_set(x, pts))
    d_man = np.atleast_1d(m.distance(np.atleast_2d(x)))
    gap = d_data ** 2 - d_man ** 2
    clamped = gap < 0
    return LateralResult(np.sqrt(np.maximum(gap, 0.0)), clamped)


def lateral_distance(x, dataset, m: Manifold):
    """``sqrt(d(x, data)^2 - d(x, M)^2)``, clamped at zero where negative."""
    res = lateral_details(x, dataset, m).value
    return float(res[0]) if np.ndim(x) == 1 else res


def tail_probability(samples, m: Manifold, r: float) -> float:
    """Fraction of samples at distance ``>= r`` from ``m``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if r < 0:
        raise DomainError("radius must be nonnegative")
    if samples.shape[0] == 0:
        return 0.0
    return float(np.mean(m.distance(samples) >= r))


def log_tail_slope(samples, m: Manifold, radii) -> float:
    """Least-squares slope of ``log P(dist >= r)`` against ``r^2``."""
    radii = np.asarray(radii, dtype=float)
    tails = np.array([tail_probability(samples, m, r) for r in radii])
    if np.any(tails <= 0):
        raise NumericalError("empty tail; increase the sample count")
    return float(np.polyfit(radii ** 2, np.log(tails), 1)[0])


def nll(model: SmoothedScoreModel, config: DiffusionConfig, eval_points,
        rng=None, noise=None) -> float:
    """Mean negative log-likelihood (nats) of the PF-ODE density at ``epsilon``."""
    return float(np.mean(nll_values(model, config, eval_points, rng=rng, noise=noise)))


def nll_values(model, config, eval_points, rng=None, noise=None) -> np.ndarray:
    from .sampler import pf_log_likelihood

    return -pf_log_likelihood(model, config, np.atleast_2d(eval_points), rng=rng, noise=noise)


def density_ratio(model: SmoothedScoreModel, epsilon: float, x, dataset: Dataset,
                  noise=None, rng=None) -> np.ndarray:
    """``p^k_eps(x) / p^k_eps(x_i*)`` with ``x_i*`` the nearest training point."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pts = dataset.points
    d2 = np.sum((x[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    nearest = pts[np.argmin(d2, axis=1)]
    if noise is None and not model.deterministic:
        noise = model.draw_noise(rng)
    la = model.log_density(epsilon, x, noise=noise)
    lb = model.log_density(epsilon, nearest, noise=noise)
    return np.exp(la - lb)


def anisotropy(image, side: Optional[int] = None, threshold: float = ANISOTROPY_THRESHOLD) -> float:
    """``lambda_max / lambda_min`` of the pixel covariance of a thresholded image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 1:
        side = int(round(math.sqrt(img.size))) if side is None else side
        if side * side != img.size:
            raise DomainError("flat image length is not a perfect square")
        img = img.reshape(side, side)
    img = np.where(img < threshold, 0.0, img)
    total = img.sum()
    if not total > 0:
        raise DomainError("image is empty after thresholding")
    rows, cols = np.indices(img.shape, dtype=np.float64)
    w = img / total
    mu = np.array([np.sum(w * cols), np.sum(w * rows)])
    du, dv = cols - mu[0], rows - mu[1]
    cov = np.array([[np.sum(w * du * du), np.sum(w * du * dv)],
                    [np.sum(w * du * dv), np.sum(w * dv * dv)]])
    lam = np.linalg.eigvalsh(cov)
    if not lam[0] > 0:
        return math.inf
    return float(lam[1] / lam[0])


def theta_histogram(samples, m: Curve, bins: int = 64):
    """Histogram of the projection parameter of each sample on a closed curve."""
    if not isinstance(m, Curve):
        raise DomainError("theta histograms need a curve manifold")
    theta = m.project(np.atleast_2d(samples)).parameter
    return np.histogram(np.mod(theta, 2 * np.pi), bins=bins, range=(0.0, 2 * np.pi))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def save_grid_density(gd: GridDensity, path: Union[str, Path]) -> Path:
    """Write ``magic | u64 header length | JSON header | f64 log-values``."""
    path = Path(path)
    header = json.dumps({"grid": gd.grid.to_dict(), "log_norm": gd.log_norm,
                         "dtype": "<f8", "order": "C"}, sort_keys=True).encode()
    payload = np.ascontiguousarray(gd.log_values, dtype="<f8").tobytes()
    path.write_bytes(_GRID_MAGIC + struct.pack("<Q", len(header)) + header + payload)
    return path


def load_grid_density(path: Union[str, Path]) -> GridDensity:
    blob = Path(path).read_bytes()
    if blob[:8] != _GRID_MAGIC:
        raise DomainError("not a grid density file")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode())
    grid = Grid(tuple(map(tuple, header["grid"]["bounds"])), tuple(header["grid"]["resolution"]))
    vals = np.frombuffer(blob[16 + n:], dtype="<f8")
    if vals.size != grid.size:
        raise DomainError("grid payload has the wrong length")
    return GridDensity(grid, vals.copy(), float(header["log_norm"]))


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_csv(rows: Sequence[dict], path: Union[str, Path],
                      extra: Sequence[str] = ()) -> Path:
    """Metric rows with the standard columns first, then ``extra`` columns."""
    path = Path(path)
    cols = list(METRIC_COLUMNS) + [c for c in extra if c not in METRIC_COLUMNS]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(format_value(row.get(c)) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path
