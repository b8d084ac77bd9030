"""Geometry backends: projections, distances, tangent frames, reach.

Analytic kinds (:class:`Affine`, :class:`Circle`, :class:`WavyCircle`) project
exactly.  Node-based kinds (:class:`CurveCloud`, :class:`BumpCurve`) project
onto a fixed set of curve nodes, which is the definition of the projection at
the chosen resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError

DEFAULT_NODES = 1024
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    distance: np.ndarray
    parameter: Optional[np.ndarray] = None


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (dim,):
        raise DomainError(f"expected trailing dimension {dim}, got {x.shape}")
    return x, x.shape[:-1], x.reshape(-1, dim)


def nearest_index(x: np.ndarray, nodes: np.ndarray, nodes_sq: Optional[np.ndarray] = None):
    """Index of the nearest node for every row of ``x`` (lowest index on ties)."""
    if nodes_sq is None:
        nodes_sq = np.sum(nodes * nodes, axis=1)
    chunk = max(1, _CHUNK_ELEMS // nodes.shape[0])
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        # |x|^2 is common to all nodes and dropped
        score = nodes_sq[None, :] - 2.0 * (xb @ nodes.T)
        out[start:start + chunk] = np.argmin(score, axis=1)
    return out


class Manifold:
    """Base class.  Subclasses set ``dim`` and ``intrinsic_dim``."""

    dim: int
    intrinsic_dim: int

    def project(self, x) -> ProjectionResult:
        raise NotImplementedError

    def distance(self, x):
        d = self.project(x).distance
        return float(d) if np.ndim(d) == 0 else d

    def tangent_frame(self, x) -> np.ndarray:
        """Orthonormal tangent basis at ``project(x)``, shape ``(..., d, k)``."""
        raise NotImplementedError

    def sample_uniform(self, n: int, rng: np.random.Generator, equispaced: bool = False):
        raise NotImplementedError

    def reach(self) -> float:
        raise NotImplementedError

    def scaled(self, factor: float) -> "Manifold":
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        if factor == 1.0:
            return self
        return Scaled(self, factor)

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


def scaled(m: Manifold, factor: float) -> Manifold:
    return m.scaled(factor)


def project(m: Manifold, x) -> ProjectionResult:
    return m.project(x)


def distance(m: Manifold, x):
    return m.distance(x)


def reach(m: Manifold) -> float:
    return m.reach()


def sample_uniform(m: Manifold, n: int, rng, equispaced: bool = False):
    return m.sample_uniform(n, rng, equispaced=equispaced)


# ---------------------------------------------------------------------------
# Affine subspaces
# ---------------------------------------------------------------------------


class Affine(Manifold):
    """The affine subspace ``{x : A x = b}`` with row-orthonormal ``A`` (k x d)."""

    def __init__(self, A, b=None, patch: Optional[Sequence[tuple]] = None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        k, d = A.shape
        if k >= d:
            raise ConfigError("affine constraint matrix must have fewer rows than columns")
        if not np.allclose(A @ A.T, np.eye(k), atol=1e-10, rtol=0):
            raise ConfigError("A must be row-orthonormal")
        b = np.zeros(k) if b is None else np.atleast_1d(np.asarray(b, dtype=np.float64))
        if b.shape != (k,):
            raise ConfigError("b must have one entry per row of A")
        self.A, self.b = A, b
        self.dim, self.intrinsic_dim = d, d - k
        self.P = np.eye(d) - A.T @ A
        # orthonormal basis of Null(A)
        _, _, vt = np.linalg.svd(A)
        self.T = vt[k:].T
        self.origin = A.T @ b
        if patch is not None:
            patch = tuple((float(lo), float(hi)) for lo, hi in patch)
            if len(patch) != self.intrinsic_dim or any(lo >= hi for lo, hi in patch):
                raise ConfigError("patch needs one (lo, hi) pair per intrinsic dimension")
        self.patch = patch

    def project(self, x):
        x, lead, flat = _as_batch(x, self.dim)
        resid = flat @ self.A.T - self.b
        point = flat - resid @ self.A
        params = (point - self.origin) @ self.T
        return ProjectionResult(point.reshape(x.shape),
                                np.linalg.norm(resid, axis=1).reshape(lead),
                                params.reshape(lead + (self.intrinsic_dim,)))

    def tangent_frame(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(self.T, x.shape[:-1] + self.T.shape)

    def sample_uniform(self, n, rng, equispaced=False):
        if self.patch is None:
            raise ConfigError("uniform sampling on an affine subspace needs patch bounds")
        lo = np.array([p[0] for p in self.patch])
        hi = np.array([p[1] for p in self.patch])
        if equispaced:
            if self.intrinsic_dim != 1:
                raise ConfigError("equispaced affine sampling is only defined for lines")
            coords = lo + (hi - lo) * (np.arange(n)[:, None] + 0.5) / n
        else:
            coords = lo + (hi - lo) * rng.random((n, self.intrinsic_dim))
        return self.origin + coords @ self.T.T

    def reach(self):
        return math.inf

    def scaled(self, factor):
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        if factor == 1.0:
            return self
        patch = None if self.patch is None else [(lo * factor, hi * factor) for lo, hi in self.patch]
        return Affine(self.A, factor * self.b, patch)

    def describe(self):
        return {"kind": "Affine", "A": self.A.tolist(), "b": self.b.tolist()}


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


def _curvature_radii(nodes: np.ndarray) -> np.ndarray:
    """Circumradius of each consecutive node triple of a closed polyline."""
    prev, nxt = np.roll(nodes, 1, axis=0), np.roll(nodes, -1, axis=0)
    u, v = prev - nodes, nxt - nodes
    w = nxt - prev
    a, b, c = (np.linalg.norm(z, axis=1) for z in (u, v, w))
    if np.any(a == 0) or np.any(b == 0):
        raise DomainError("degenerate curve: repeated consecutive nodes")
    gram = np.sum(u * u, axis=1) * np.sum(v * v, axis=1) - np.sum(u * v, axis=1) ** 2
    area = 0.5 * np.sqrt(np.maximum(gram, 0.0))
    with np.errstate(divide="ignore"):
        return np.where(area > 0, a * b * c / (4.0 * area), np.inf)


def _bottleneck(nodes: np.ndarray) -> float:
    """Half the shortest locally-minimal chord between distinct curve points."""
    n = len(nodes)
    sq = np.sum(nodes * nodes, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * nodes @ nodes.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    is_min = np.ones_like(d2, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_min &= d2 <= np.roll(np.roll(d2, di, axis=0), dj, axis=1)
    # chords touching the diagonal band are just neighbouring nodes
    idx = np.arange(n)
    gap = np.abs(idx[:, None] - idx[None, :])
    gap = np.minimum(gap, n - gap)
    is_min &= gap > 2
    if not np.any(is_min):
        return math.inf
    return 0.5 * math.sqrt(float(np.min(d2[is_min])))


def node_reach(nodes: np.ndarray) -> float:
    """Reach estimate of a closed curve given by ordered nodes."""
    rho = float(np.min(_curvature_radii(nodes)))
    return min(rho, _bottleneck(nodes))


class Curve(Manifold):
    """Closed curve parameterised by ``theta in [0, 2 pi)``."""

    intrinsic_dim = 1
    resolution: int = DEFAULT_NODES

    def point(self, theta) -> np.ndarray:
        raise NotImplementedError

    def node_params(self, n: Optional[int] = None) -> np.ndarray:
        n = self.resolution if n is None else n
        return 2.0 * np.pi * np.arange(n) / n

    def nodes(self, n: Optional[int] = None) -> np.ndarray:
        return self.point(self.node_params(n))

    def _node_cache(self):
        cache = getattr(self, "_nodes_cached", None)
        if cache is None:
            theta = self.node_params()
            pts = self.point(theta)
            cache = (theta, pts, np.sum(pts * pts, axis=1))
            self._nodes_cached = cache
        return cache

    def project(self, x):
        x, lead, flat = _as_batch(x, self.dim)
        theta, pts, sq = self._node_cache()
        idx = nearest_index(flat, pts, sq)
        point = pts[idx]
        dist = np.linalg.norm(flat - point, axis=1)
        return ProjectionResult(point.reshape(x.shape), dist.reshape(lead),
                                theta[idx].reshape(lead))

    def tangent_at(self, theta) -> np.ndarray:
        h = 1e-5
        theta = np.asarray(theta, dtype=np.float64)
        tan = (self.point(theta + h) - self.point(theta - h)) / (2 * h)
        return tan / np.linalg.norm(tan, axis=-1, keepdims=True)

    def tangent_frame(self, x):
        res = self.project(x)
        return self.tangent_at(res.parameter)[..., None]

    def sample_uniform(self, n, rng, equispaced=False):
        if n < 1:
            raise DomainError("n must be >= 1")
        theta = self.node_params(n) if equispaced else 2.0 * np.pi * rng.random(n)
        return self.point(theta)

    def reach(self):
        return node_reach(self.nodes())


class Circle(Curve):
    def __init__(self, radius: float = 1.0, center=(0.0, 0.0)):
        if not radius > 0:
            raise ConfigError("circle radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)
        if self.center.shape != (2,):
            raise ConfigError("circle center must be 2-D")
        self.dim = 2

    def point(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return self.center + self.radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def project(self, x):
        x, lead, flat = _as_batch(x, 2)
        rel = flat - self.center
        norm = np.linalg.norm(rel, axis=1)
        # the centre is equidistant from every point; resolve to theta = 0
        theta = np.where(norm > 0, np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi), 0.0)
        point = self.point(theta)
        dist = np.abs(norm - self.radius)
        return ProjectionResult(point.reshape(x.shape), dist.reshape(lead), theta.reshape(lead))

    def tangent_at(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)

    def reach(self):
        return self.radius

    def scaled(self, factor):
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        if factor == 1.0:
            return self
        return Circle(self.radius * factor, self.center * factor)

    def describe(self):
        return {"kind": "Circle", "radius": self.radius, "center": self.center.tolist()}


class WavyCircle(Curve):
    """Polar curve ``r(theta) = R + a sin(m theta)`` around ``center``."""

    def __init__(self, R: float = 1.0, amplitude: float = 0.15, frequency: int = 8,
                 center=(0.0, 0.0), resolution: int = DEFAULT_NODES):
        if not (R > 0 and 0 <= amplitude < R):
            raise ConfigError("wavy circle needs R > 0 and 0 <= amplitude < R")
        if int(frequency) != frequency or frequency < 0:
            raise ConfigError("frequency must be a nonnegative integer")
        self.R, self.amplitude, self.frequency = float(R), float(amplitude), int(frequency)
        self.center = np.asarray(center, dtype=np.float64)
        self.resolution = int(resolution)
        self.dim = 2

    def _polar(self, theta):
        a, m = self.amplitude, self.frequency
        r = self.R + a * np.sin(m * theta)
        dr = a * m * np.cos(m * theta)
        ddr = -a * m * m * np.sin(m * theta)
        return r, dr, ddr

    def point(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        r, _, _ = self._polar(theta)
        return self.center + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)

    def _derivs(self, theta):
        r, dr, ddr = self._polar(theta)
        c, s = np.cos(theta), np.sin(theta)
        d1 = np.stack([dr * c - r * s, dr * s + r * c], axis=-1)
        d2 = np.stack([ddr * c - 2 * dr * s - r * c, ddr * s + 2 * dr * c - r * s], axis=-1)
        return d1, d2

    def tangent_at(self, theta):
        d1, _ = self._derivs(np.asarray(theta, dtype=np.float64))
        return d1 / np.linalg.norm(d1, axis=-1, keepdims=True)

    def project(self, x):
        x, lead, flat = _as_batch(x, 2)
        theta_n, pts, sq = self._node_cache()
        idx = nearest_index(flat, pts, sq)
        h = 2 * np.pi / len(theta_n)
        lo, hi = theta_n[idx] - h, theta_n[idx] + h
        theta = theta_n[idx].copy()
        # Newton refinement of |x - c(theta)|^2 inside the bracketing node cell
        for _ in range(30):
            c = self.point(theta)
            d1, d2 = self._derivs(theta)
            rel = flat - c
            g = -np.sum(rel * d1, axis=1)
            hess = np.sum(d1 * d1, axis=1) - np.sum(rel * d2, axis=1)
            step = np.where(hess > 0, g / np.where(hess > 0, hess, 1.0), 0.0)
            new = np.clip(theta - step, lo, hi)
            if np.max(np.abs(new - theta)) < 1e-15:
                theta = new
                break
            theta = new
        node_d = np.linalg.norm(flat - pts[idx], axis=1)
        ref_d = np.linalg.norm(flat - self.point(theta), axis=1)
        theta = np.where(ref_d <= node_d, theta, theta_n[idx])
        theta = np.mod(theta, 2 * np.pi)
        point = self.point(theta)
        dist = np.linalg.norm(flat - point, axis=1)
        return ProjectionResult(point.reshape(x.shape), dist.reshape(lead), theta.reshape(lead))

    def curvature(self, theta) -> np.ndarray:
        """Signed curvature of the polar curve."""
        r, dr, ddr = self._polar(np.asarray(theta, dtype=np.float64))
        return (r * r + 2 * dr * dr - r * ddr) / (r * r + dr * dr) ** 1.5

    def scaled(self, factor):
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        if factor == 1.0:
            return self
        return WavyCircle(self.R * factor, self.amplitude * factor, self.frequency,
                          self.center * factor, self.resolution)

    def base_circle(self) -> Circle:
        return Circle(self.R, self.center)

    def describe(self):
        return {"kind": "WavyCircle", "R": self.R, "amplitude": self.amplitude,
                "frequency": self.frequency, "center": self.center.tolist()}


class CurveCloud(Curve):
    """Closed curve given by ordered nodes (first and last are joined)."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim != 2 or nodes.shape[0] < 3:
            raise ConfigError("a curve cloud needs at least 3 ordered nodes")
        if not np.all(np.isfinite(nodes)):
            raise ConfigError("curve nodes must be finite")
        self._pts = nodes
        self.dim = nodes.shape[1]
        self.resolution = nodes.shape[0]
        seg = np.linalg.norm(np.roll(nodes, -1, axis=0) - nodes, axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        self._length = self._cum[-1]
        if not self._length > 0:
            raise ConfigError("degenerate curve cloud")

    @classmethod
    def from_file(cls, path, **kwargs) -> "CurveCloud":
        from .core import load_dataset
        return cls(load_dataset(path, **kwargs).points)

    def node_params(self, n=None):
        if n is not None and n != self.resolution:
            return 2 * np.pi * np.arange(n) / n
        return 2 * np.pi * self._cum[:-1] / self._length

    def nodes(self, n=None):
        if n is None or n == self.resolution:
            return self._pts
        return self.point(self.node_params(n))

    def _node_cache(self):
        cache = getattr(self, "_nodes_cached", None)
        if cache is None:
            cache = (self.node_params(), self._pts, np.sum(self._pts ** 2, axis=1))
            self._nodes_cached = cache
        return cache

    def point(self, theta):
        """Linear interpolation along the closed polyline by arc length."""
        theta = np.asarray(theta, dtype=np.float64)
        s = np.mod(theta, 2 * np.pi) / (2 * np.pi) * self._length
        seg = np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, self.resolution - 1)
        seg_len = self._cum[seg + 1] - self._cum[seg]
        frac = np.where(seg_len > 0, (s - self._cum[seg]) / np.where(seg_len > 0, seg_len, 1), 0)
        a = self._pts[seg]
        b = self._pts[(seg + 1) % self.resolution]
        return a + frac[..., None] * (b - a)

    def tangent_at(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        dt = 2 * np.pi * 0.5 * np.min(np.diff(self._cum)[np.diff(self._cum) > 0]) / self._length
        tan = self.point(theta + dt) - self.point(theta - dt)
        return tan / np.linalg.norm(tan, axis=-1, keepdims=True)

    def scaled(self, factor):
        if not factor > 0:
            raise DomainError("scale factor must be positive")
        if factor == 1.0:
            return self
        return CurveCloud(self._pts * factor)

    def describe(self):
        return {"kind": "CurveCloud", "n_nodes": self.resolution, "dim": self.dim}


class BumpCurve(Curve):
    """Images of a Gaussian bump travelling around a circle.

    ``point(theta)`` is a ``side x side`` image over ``[-1, 1]^2`` holding the
    density of an isotropic Gaussian with standard deviation ``eta`` centred
    at ``circle_radius * (cos theta, sin theta)``, rescaled to maximum 1 and
    flattened row-major (rows index ``v``, columns index ``u``).
    """

    def __init__(self, eta: float = 0.2, side: int = 64, circle_radius: float = 0.5,
                 resolution: int = DEFAULT_NODES):
        if not (eta > 0 and circle_radius > 0) or side < 2:
            raise ConfigError("bump curve needs eta > 0, circle_radius > 0 and side >= 2")
        self.eta, self.side, self.circle_radius = float(eta), int(side), float(circle_radius)
        self.resolution = int(resolution)
        self.dim = self.side * self.side
        self.grid = np.linspace(-1.0, 1.0, self.side)

    def point(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        flat = theta.reshape(-1)
        cu = self.circle_radius * np.cos(flat)
        cv = self.circle_radius * np.sin(flat)
        gu = np.exp(-((self.grid[None, :] - cu[:, None]) ** 2) / (2 * self.eta ** 2))
        gv = np.exp(-((self.grid[None, :] - cv[:, None]) ** 2) / (2 * self.eta ** 2))
        img = gv[:, :, None] * gu[:, None, :]
        img /= np.max(img, axis=(1, 2), keepdims=True)
        return img.reshape(theta.shape + (self.dim,))

    def image(self, theta) -> np.ndarray:
        return self.point(theta)

    def describe(self):
        return {"kind": "BumpCurve", "eta": self.eta, "side": self.side,
                "circle_radius": self.circle_radius, "resolution": self.resolution}


def bump_image(m: BumpCurve, theta: float) -> np.ndarray:
    theta = float(theta)
    if not 0 <= theta < 2 * np.pi:
        raise DomainError("theta must lie in [0, 2 pi)")
    return m.point(theta)


class Scaled(Manifold):
    """``factor * base`` with projection ``factor * base.project(x / factor)``."""

    def __init__(self, base: Manifold, factor: float):
        self.base, self.factor = base, float(factor)
        self.dim, self.intrinsic_dim = base.dim, base.intrinsic_dim

    def project(self, x):
        res = self.base.project(np.asarray(x, dtype=np.float64) / self.factor)
        return ProjectionResult(res.point * self.factor, res.distance * self.factor, res.parameter)

    def tangent_frame(self, x):
        return self.base.tangent_frame(np.asarray(x, dtype=np.float64) / self.factor)

    def sample_uniform(self, n, rng, equispaced=False):
        return self.factor * self.base.sample_uniform(n, rng, equispaced)

    def nodes(self, n=None):
        return self.factor * self.base.nodes(n)

    def reach(self):
        return self.factor * self.base.reach()

    def scaled(self, factor):
        return self.base.scaled(self.factor * factor)

    def describe(self):
        return {"kind": "Scaled", "factor": self.factor, "base": self.base.describe()}


def manifold_from_dict(spec: dict) -> Manifold:
    """Build a manifold from a JSON-style ``{"kind": ..., params}`` mapping."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "Affine":
            return Affine(spec["A"], spec.get("b"), spec.get("patch"))
        if kind == "Circle":
            return Circle(spec.get("radius", 1.0), spec.get("center", (0.0, 0.0)))
        if kind == "WavyCircle":
            return WavyCircle(spec.get("R", 1.0), spec.get("amplitude", 0.15),
                              spec.get("frequency", 8), spec.get("center", (0.0, 0.0)))
        if kind == "CurveCloud":
            if "path" in spec:
                return CurveCloud.from_file(spec["path"])
            return CurveCloud(spec["nodes"])
        if kind == "BumpCurve":
            return BumpCurve(spec.get("eta", 0.2), spec.get("side", 64),
                             spec.get("circle_radius", 0.5),
                             spec.get("resolution", DEFAULT_NODES))
    except KeyError as exc:
        raise ConfigError(f"manifold {kind!r} missing field {exc}") from None
    raise ConfigError(f"unknown manifold kind {kind!r}")
