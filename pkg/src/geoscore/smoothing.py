"""Kernel-smoothed empirical score, log-density exponent and divergence.

Monte Carlo averages take a *noise* argument so callers control coupling:
noise of shape ``(M, d)`` is shared by all query points (common random
numbers across ``x``), shape ``(B, M, d)`` gives each point its own draws.

Two reduced evaluation routes keep image-sized problems tractable.  Both
produce estimators with exactly the same distribution as the direct route:

* isotropic Gaussian smoothing only needs the noise components inside the
  span of the training points, plus the mean of the remaining components;
* shifted-manifold smoothing only needs the inner products of the noise with
  the curve nodes, i.e. its coordinates in the row space of the node matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset, NoiseSchedule
from .empirical_score import evaluate_raw
from .errors import CapabilityError, ConfigError, DomainError
from .kernels import FixedStencil, IsotropicGaussian, Kernel, ShiftedManifoldAdapted
from .manifolds import Affine, nearest_index

REDUCE_DIM = 64

# Defaults for the number of kernel draws per evaluation.
SAMPLES_LOW_DIM = 1000
SAMPLES_IMAGE_ISOTROPIC = 50_000
SAMPLES_ADAPTED = 1000


def _orthonormal_rows(mat: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (as columns) of the row space of ``mat``."""
    _, s, vt = np.linalg.svd(mat, full_matrices=False)
    keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    return vt[keep].T, s[keep], keep


@dataclass(eq=False)
class SmoothedScoreModel:
    dataset: Dataset
    schedule: NoiseSchedule
    kernel: Optional[Kernel] = None
    n_samples: int = SAMPLES_LOW_DIM
    mode: str = "monte_carlo"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ("monte_carlo", "quadrature"):
            raise ConfigError("mode must be 'monte_carlo' or 'quadrature'")
        if self.mode == "quadrature" and not isinstance(self.kernel, FixedStencil):
            raise CapabilityError("quadrature mode needs a kernel exposing nodes")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ConfigError("n_samples must be a positive integer")

    # -- routing -----------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def passthrough(self) -> bool:
        k = self.kernel
        if k is None:
            return True
        return isinstance(k, (IsotropicGaussian, ShiftedManifoldAdapted)) and k.sigma == 0

    @property
    def route(self) -> str:
        if self.passthrough:
            return "raw"
        if self.mode == "quadrature":
            return "quadrature"
        if self.dim > REDUCE_DIM and isinstance(self.kernel, IsotropicGaussian):
            return "span"
        if (self.dim > REDUCE_DIM and isinstance(self.kernel, ShiftedManifoldAdapted)
                and not isinstance(self.kernel.manifold, Affine)):
            return "nodes"
        return "direct"

    @property
    def deterministic(self) -> bool:
        return self.route in ("raw", "quadrature")

    def describe(self) -> dict:
        return {"kernel": None if self.kernel is None else self.kernel.describe(),
                "n_samples": self.n_samples, "mode": self.mode}

    # -- noise -------------------------------------------------------------

    def _span(self):
        if "span" not in self._cache:
            q, _, _ = _orthonormal_rows(self.dataset.points)
            self._cache["span"] = q
        return self._cache["span"]

    def _node_factors(self):
        if "nodes" not in self._cache:
            factors = dict(self.kernel.node_factors())
            factors["node_data"] = factors["nodes"] @ self.dataset.points.T
            self._cache["nodes"] = factors
        return self._cache["nodes"]

    def draw_noise(self, rng: np.random.Generator, n: Optional[int] = None):
        """Noise for one query point in the form the current route consumes."""
        n = self.n_samples if n is None else n
        route = self.route
        if route in ("raw", "quadrature"):
            return None
        if route == "span":
            q = self._span()
            coeff = rng.standard_normal((n, q.shape[1]))
            g = rng.standard_normal(self.dim) / np.sqrt(n)
            return {"coeff": coeff, "perp_mean": g - q @ (q.T @ g)}
        if route == "nodes":
            r = self._node_factors()["us"].shape[1]
            return {"coeff": rng.standard_normal((n, r))}
        return self.kernel.sample_noise(rng, n, self.dim)

    def draw_noise_batch(self, rngs) -> object:
        parts = [self.draw_noise(g) for g in rngs]
        if parts[0] is None:
            return None
        if isinstance(parts[0], dict):
            return {key: np.stack([p[key] for p in parts]) for key in parts[0]}
        return np.stack(parts)

    # -- evaluation --------------------------------------------------------

    def _draws(self, x, noise):
        if self.mode == "quadrature":
            pts, w = self.kernel.nodes(x)
            return pts, w
        if noise is None:
            raise DomainError("Monte Carlo smoothing needs noise or an rng")
        return self.kernel.apply(x, noise), None

    def _averaged(self, t, x, noise, want):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected points of dimension {self.dim}")
        mu, sigma = self.schedule.mu_sigma(t)
        if self.passthrough:
            return evaluate_raw(self.dataset.points, mu, sigma, x, want)
        ys, weights = self._draws(x, noise)
        b, m, d = ys.shape
        res = evaluate_raw(self.dataset.points, mu, sigma, ys.reshape(-1, d), want)
        if weights is None:
            weights = np.full(m, 1.0 / m)
        out = {}
        for key in want:
            vals = res[key].reshape((b, m) + res[key].shape[1:])
            # a contraction is much faster than a strided mean over the middle axis
            out[key] = np.einsum("m,bm...->b...", weights, vals)
        return out

    def _resolve(self, x, noise, rng):
        if noise is None and rng is not None and not self.deterministic:
            # independent draws per query point, consumed in point order
            noise = self.draw_noise_batch([rng] * np.atleast_2d(x).shape[0])
        return noise

    def score(self, t, x, noise=None, rng=None) -> np.ndarray:
        noise = self._resolve(x, noise, rng)
        route = self.route
        if route == "span":
            return self._score_span(t, x, noise)
        if route == "nodes":
            return self._score_nodes(t, x, noise)
        return self._averaged(t, x, noise, ("score",))["score"]

    def log_density(self, t, x, noise=None, rng=None) -> np.ndarray:
        """Unnormalised log-density exponent ``E_{Y ~ k_x} log p_t(Y)``."""
        self._direct_only("log-density exponent")
        noise = self._resolve(x, noise, rng)
        return self._averaged(t, x, noise, ("log_density",))["log_density"]

    def divergence(self, t, x, noise=None, rng=None) -> np.ndarray:
        self._require_commuting()
        self._direct_only("divergence")
        noise = self._resolve(x, noise, rng)
        return self._averaged(t, x, noise, ("laplacian",))["laplacian"]

    def score_and_divergence(self, t, x, noise=None):
        self._require_commuting()
        self._direct_only("divergence")
        out = self._averaged(t, x, noise, ("score", "laplacian"))
        return out["score"], out["laplacian"]

    def _require_commuting(self):
        if self.passthrough:
            return
        if not self.kernel.location_independent:
            raise CapabilityError(
                "smoothed divergence needs a location-independent kernel")

    def _direct_only(self, what):
        if self.route in ("span", "nodes"):
            raise CapabilityError(f"{what} is only available for d <= {REDUCE_DIM}")

    # -- reduced routes ------------------------------------------------------

    def _score_span(self, t, x, noise):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu, sigma = self.schedule.mu_sigma(t)
        s2 = sigma * sigma
        q = self._span()
        pts = self.dataset.points
        coeff = noise["coeff"]
        perp = noise["perp_mean"]
        if coeff.ndim == 2:
            coeff = np.broadcast_to(coeff, (x.shape[0],) + coeff.shape)
            perp = np.broadcast_to(perp, (x.shape[0],) + perp.shape)
        ks = self.kernel.sigma
        pts_red = pts @ q  # (N, r)
        base = mu * (x @ pts.T) - 0.5 * mu * mu * np.sum(pts * pts, axis=1)  # (B, N)
        logits = (base[:, None, :] + mu * ks * np.einsum("bmr,nr->bmn", coeff, pts_red)) / s2
        logits -= np.max(logits, axis=2, keepdims=True)
        w = np.exp(logits)
        w /= np.sum(w, axis=2, keepdims=True)
        wbar = np.mean(w, axis=1)  # (B, N)
        zbar = np.mean(coeff, axis=1) @ q.T + perp  # (B, d)
        return (mu * (wbar @ pts) - x - ks * zbar) / s2

    def _score_nodes(self, t, x, noise):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu, sigma = self.schedule.mu_sigma(t)
        s2 = sigma * sigma
        f = self._node_factors()
        nodes, nodes_sq, us = f["nodes"], f["nodes_sq"], f["us"]
        pts = self.dataset.points
        pts_sq = np.sum(pts * pts, axis=1)
        coeff = noise["coeff"]
        if coeff.ndim == 2:
            coeff = np.broadcast_to(coeff, (x.shape[0],) + coeff.shape)
        ks = self.kernel.sigma
        anchor = nearest_index(x, nodes, nodes_sq)  # projection of x
        shift = x - nodes[anchor]
        shift_dot = shift @ pts.T  # (B, N)
        us_t = (-2.0 * ks) * us.T
        out = np.empty_like(x)
        for b in range(x.shape[0]):
            # argmin_j |nodes[a] + ks z - nodes[j]|^2 with z entering through nodes @ z
            crit = coeff[b] @ us_t
            crit += nodes_sq - 2.0 * f["gram_nodes"][anchor[b]]
            j = np.argmin(crit, axis=1)
            dots = f["node_data"][j] + shift_dot[b]  # Y' . x_i
            logits = (mu * dots - 0.5 * mu * mu * pts_sq) / s2
            logits -= np.max(logits, axis=1, keepdims=True)
            w = np.exp(logits)
            w /= np.sum(w, axis=1, keepdims=True)
            counts = np.bincount(j, minlength=nodes.shape[0]) / j.size
            mean_y = counts @ nodes + shift[b]
            out[b] = (mu * (np.mean(w, axis=0) @ pts) - mean_y) / s2
        return out


def smoothed_score(model: SmoothedScoreModel, t, x, rng=None, noise=None):
    x = np.asarray(x, dtype=np.float64)
    out = model.score(t, x, noise=noise, rng=rng)
    return out[0] if x.ndim == 1 else out


def smoothed_log_density(model: SmoothedScoreModel, epsilon, x, rng=None, noise=None):
    x = np.asarray(x, dtype=np.float64)
    out = model.log_density(epsilon, x, noise=noise, rng=rng)
    return float(out[0]) if x.ndim == 1 else out


def smoothed_divergence(model: SmoothedScoreModel, t, x, rng=None, noise=None):
    x = np.asarray(x, dtype=np.float64)
    out = model.divergence(t, x, noise=noise, rng=rng)
    return float(out[0]) if x.ndim == 1 else out
