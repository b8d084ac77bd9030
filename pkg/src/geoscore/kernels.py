"""Smoothing kernels ``k_x`` and their normal-spread diagnostics.

A kernel separates *noise* from *placement*: :meth:`Kernel.sample_noise`
draws location-free randomness and :meth:`Kernel.apply` maps it to draws
around query points.  Passing the same noise to several query points gives
common random numbers across the spatial argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CapabilityError, ConfigError, DomainError, NumericalError
from .manifolds import Affine, Manifold, manifold_from_dict, nearest_index

LEVEL_SET_R_SAMPLES = 256
MAX_RETRIES = 16


def _broadcast(x: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shapes ``x`` (B, d) and noise (M, d) or (B, M, d) to (B, 1, d), (B|1, M, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if noise.ndim == 2:
        noise = noise[None, :, :]
    return x[:, None, :], noise


class Kernel:
    location_independent = False

    def sample_noise(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        return rng.standard_normal((n, d))

    def apply(self, x, noise, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Draws for every query point, shape ``(B, M, d)``."""
        raise NotImplementedError

    def draw(self, x, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        noise = self.sample_noise(rng, n, x.shape[-1])
        out = self.apply(x.reshape(-1, x.shape[-1]), noise, rng=rng)
        return out.reshape(x.shape[:-1] + (n, x.shape[-1]))

    def nodes(self, x):
        raise CapabilityError(f"{type(self).__name__} has no deterministic quadrature nodes")

    def describe(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class IsotropicGaussian(Kernel):
    sigma: float
    location_independent = True

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError("sigma must be nonnegative")

    def sample_noise(self, rng, n, d):
        return self.sigma * rng.standard_normal((n, d))

    def apply(self, x, noise, rng=None):
        xb, nz = _broadcast(x, np.asarray(noise, dtype=np.float64))
        return xb + nz

    def describe(self):
        return {"kind": "IsotropicGaussian", "sigma": self.sigma}


class FixedStencil(Kernel):
    """Uniform law on ``{x + h v_j, x - h v_j}`` for orthonormal directions ``v_j``.

    The directions default to the coordinate axes.
    """

    location_independent = True

    def __init__(self, h: float, directions=None):
        if not h > 0:
            raise ConfigError("stencil step h must be positive")
        self.h = float(h)
        self.directions = None if directions is None else np.atleast_2d(
            np.asarray(directions, dtype=np.float64))

    def offsets(self, d: int) -> np.ndarray:
        dirs = np.eye(d) if self.directions is None else self.directions
        if dirs.shape[1] != d:
            raise DomainError("stencil directions do not match the dimension")
        return np.concatenate([self.h * dirs, -self.h * dirs], axis=0)

    def sample_noise(self, rng, n, d):
        offs = self.offsets(d)
        return offs[rng.integers(0, len(offs), size=n)]

    def apply(self, x, noise, rng=None):
        xb, nz = _broadcast(x, np.asarray(noise, dtype=np.float64))
        return xb + nz

    def nodes(self, x):
        """Stencil points and their equal weights."""
        x = np.asarray(x, dtype=np.float64)
        offs = self.offsets(x.shape[-1])
        pts = x[..., None, :] + offs
        return pts, np.full(len(offs), 1.0 / len(offs))

    def describe(self):
        out = {"kind": "FixedStencil", "h": self.h}
        if self.directions is not None:
            out["directions"] = self.directions.tolist()
        return out


class AnisotropicGaussian(Kernel):
    """Gaussian with separate spreads along and across ``frame_source``.

    The frame is the tangent space of ``frame_source`` at the projection of
    the query point.
    """

    def __init__(self, sigma_tangent: float, sigma_normal: float, frame_source: Manifold):
        if not (sigma_tangent >= 0 and sigma_normal >= 0):
            raise ConfigError("kernel scales must be nonnegative")
        self.sigma_tangent, self.sigma_normal = float(sigma_tangent), float(sigma_normal)
        self.frame_source = frame_source

    def apply(self, x, noise, rng=None):
        xb, z = _broadcast(x, np.asarray(noise, dtype=np.float64))
        frame = self.frame_source.tangent_frame(xb[:, 0, :])  # (B, d, k)
        tang = np.einsum("bdk,bmd->bmk", frame, z)
        along = np.einsum("bdk,bmk->bmd", frame, tang)
        return xb + self.sigma_normal * z + (self.sigma_tangent - self.sigma_normal) * along

    def describe(self):
        return {"kind": "AnisotropicGaussian", "sigma_tangent": self.sigma_tangent,
                "sigma_normal": self.sigma_normal, "frame_source": self.frame_source.describe()}


class LevelSetAdapted(Kernel):
    """Base draws pushed onto a level set of the distance to ``scale * manifold``.

    ``r(x)`` is the root-mean-square distance of base draws to the scaled
    manifold, estimated from the first ``r_samples`` base draws at ``x``.
    Each draw ``Y`` moves along the ray from its projection through ``Y``
    to distance ``r(x)``.
    """

    def __init__(self, base: Kernel, manifold: Manifold, epsilon_scale: float = 1.0,
                 r_samples: int = LEVEL_SET_R_SAMPLES):
        if not base.location_independent:
            raise ConfigError("level-set adaptation needs a location-independent base kernel")
        if not epsilon_scale > 0:
            raise ConfigError("epsilon_scale must be positive")
        self.base, self.manifold = base, manifold
        self.epsilon_scale = float(epsilon_scale)
        self.r_samples = int(r_samples)
        self.target = manifold.scaled(self.epsilon_scale)

    def sample_noise(self, rng, n, d):
        return self.base.sample_noise(rng, n, d)

    def _place(self, y: np.ndarray):
        proj = self.target.project(y)
        offset = y - proj.point
        return proj, offset, proj.distance

    def apply(self, x, noise, rng=None):
        noise = np.asarray(noise, dtype=np.float64)
        y = self.base.apply(x, noise)
        b, m, d = y.shape
        proj, offset, dist = self._place(y)
        r = np.sqrt(np.mean(dist[:, : self.r_samples] ** 2, axis=1))  # (B,)
        bad = (dist == 0) & (r[:, None] > 0)
        tries = 0
        while np.any(bad):
            if rng is None or tries >= MAX_RETRIES:
                raise NumericalError("level-set move undefined: draw lies on the manifold")
            tries += 1
            fresh = self.base.sample_noise(rng, int(bad.sum()), d)
            xb = np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(-1, d)[:, None, :],
                                 (b, m, d))[bad]
            y[bad] = xb + fresh
            proj, offset, dist = self._place(y)
            bad = (dist == 0) & (r[:, None] > 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[..., None] > 0, offset / dist[..., None], 0.0)
        return proj.point + r[:, None, None] * unit

    def radius(self, x, noise) -> np.ndarray:
        y = self.base.apply(x, np.asarray(noise, dtype=np.float64))
        dist = self.target.project(y).distance
        return np.sqrt(np.mean(dist[:, : self.r_samples] ** 2, axis=1))

    def describe(self):
        return {"kind": "LevelSetAdapted", "base": self.base.describe(),
                "manifold": self.manifold.describe(), "epsilon_scale": self.epsilon_scale,
                "r_samples": self.r_samples}


class ShiftedManifoldAdapted(Kernel):
    """Gaussian noise projected onto the copy of ``manifold`` translated through x.

    Projections onto curves use the argmin over ``n_proj_nodes`` equispaced
    nodes; affine manifolds project exactly.
    """

    def __init__(self, sigma: float, manifold: Manifold, n_proj_nodes: int = 1024):
        if not sigma >= 0:
            raise ConfigError("sigma must be nonnegative")
        if n_proj_nodes < 3:
            raise ConfigError("n_proj_nodes must be >= 3")
        self.sigma, self.manifold, self.n_proj_nodes = float(sigma), manifold, int(n_proj_nodes)
        self._nodes = None
        if not isinstance(manifold, Affine):
            nodes = manifold.nodes(self.n_proj_nodes)
            self._nodes = (nodes, np.sum(nodes * nodes, axis=1))

    def sample_noise(self, rng, n, d):
        return self.sigma * rng.standard_normal((n, d))

    def project_nodes(self, y: np.ndarray) -> np.ndarray:
        if self._nodes is None:
            return self.manifold.project(y).point
        flat = y.reshape(-1, y.shape[-1])
        nodes, sq = self._nodes
        return nodes[nearest_index(flat, nodes, sq)].reshape(y.shape)

    def node_table(self):
        return self._nodes

    def node_factors(self) -> dict:
        """Node matrix factors, shared by every kernel on the same manifold."""
        cache = self.manifold.__dict__.setdefault("_node_factor_cache", {})
        if self.n_proj_nodes not in cache:
            nodes, nodes_sq = self._nodes
            u, s, _ = np.linalg.svd(nodes, full_matrices=False)
            keep = s > 1e-12 * s[0]
            cache[self.n_proj_nodes] = {
                "nodes": nodes, "nodes_sq": nodes_sq,
                "us": u[:, keep] * s[keep],  # nodes @ V == U S
                "gram_nodes": nodes @ nodes.T,
            }
        return cache[self.n_proj_nodes]

    def apply(self, x, noise, rng=None):
        xb, nz = _broadcast(x, np.asarray(noise, dtype=np.float64))
        shift = xb - self.project_nodes(xb)
        y = xb + nz
        return self.project_nodes(y - shift) + shift

    def describe(self):
        return {"kind": "ShiftedManifoldAdapted", "sigma": self.sigma,
                "manifold": self.manifold.describe(), "n_proj_nodes": self.n_proj_nodes}


def draw(k: Kernel, x, rng, n: int = 1) -> np.ndarray:
    return k.draw(x, rng, n)


def nodes(k: Kernel, x):
    return k.nodes(x)


@dataclass(frozen=True)
class KernelDiagnostics:
    K: float
    K_max: float
    probe_count: int


def estimate_K(k: Kernel, m: Manifold, probes, samples_per_probe: int,
               rng: np.random.Generator) -> KernelDiagnostics:
    """Measured normal spread: ``K^2 = max_x E|dist(Y,M) - dist(x,M)|^2``."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] == 0:
        raise DomainError("need at least one probe")
    noise = k.sample_noise(rng, samples_per_probe * probes.shape[0], probes.shape[1])
    noise = noise.reshape(probes.shape[0], samples_per_probe, probes.shape[1])
    y = k.apply(probes, noise, rng=rng)
    dev = np.abs(m.distance(y) - m.distance(probes)[:, None])
    k2 = float(np.max(np.mean(dev * dev, axis=1)))
    return KernelDiagnostics(K=math.sqrt(k2), K_max=float(np.max(dev)),
                             probe_count=probes.shape[0])


def kernel_from_dict(spec: dict) -> Kernel:
    """Build a kernel from ``{"kind": ..., parameters...}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "IsotropicGaussian":
            return IsotropicGaussian(float(spec["sigma"]))
        if kind == "FixedStencil":
            return FixedStencil(float(spec["h"]), spec.get("directions"))
        if kind == "AnisotropicGaussian":
            return AnisotropicGaussian(float(spec["sigma_tangent"]), float(spec["sigma_normal"]),
                                       manifold_from_dict(spec["frame_source"]))
        if kind == "LevelSetAdapted":
            return LevelSetAdapted(kernel_from_dict(spec["base"]),
                                   manifold_from_dict(spec["manifold"]),
                                   float(spec.get("epsilon_scale", 1.0)),
                                   int(spec.get("r_samples", LEVEL_SET_R_SAMPLES)))
        if kind == "ShiftedManifoldAdapted":
            return ShiftedManifoldAdapted(float(spec["sigma"]), manifold_from_dict(spec["manifold"]),
                                          int(spec.get("n_proj_nodes", 1024)))
    except KeyError as exc:
        raise ConfigError(f"kernel {kind!r} missing field {exc}") from None
    raise ConfigError(f"unknown kernel kind {kind!r}")
