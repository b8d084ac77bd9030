"""Closed-form noised empirical density, its score and Laplacian.

For training points ``x_i`` the noised empirical density is the Gaussian
mixture ``p_t(x) = N^-1 sum_i N(x; mu_t x_i, sigma_t^2 I)``.  All quantities
are computed from the softmax responsibilities of the mixture logits
``-|x - mu_t x_i|^2 / (2 sigma_t^2)``, which keeps them finite for tiny
``sigma_t`` and far-away ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dataset, NoiseSchedule
from .errors import DomainError

# small enough that the (N, chunk) logit block stays in cache
_CHUNK_ELEMS = 1 << 16


def lse(values, axis: int = -1):
    """Overflow-free ``log(sum(exp(values)))`` along ``axis``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError("lse of an empty list")
    vmax = np.max(v, axis=axis, keepdims=True)
    vmax = np.where(np.isfinite(vmax), vmax, 0.0)
    out = np.log(np.sum(np.exp(v - vmax), axis=axis)) + np.squeeze(vmax, axis=axis)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScoreEvaluation:
    log_density: np.ndarray
    score: np.ndarray
    laplacian: np.ndarray
    responsibilities: np.ndarray


def _check(dataset: Dataset, schedule: NoiseSchedule, t, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (dataset.dim,):
        raise DomainError(f"x has trailing dimension {x.shape[-1:]}, expected {dataset.dim}")
    mu, sigma = schedule.mu_sigma(t)
    if not sigma > 0:
        raise DomainError("sigma_t must be positive")
    return x, mu, sigma



def evaluate_raw(points: np.ndarray, mu: float, sigma: float, x: np.ndarray,
                 want: tuple = ("log_density", "score", "laplacian")) -> dict:
    """Fused evaluation on a flat batch ``x`` of shape ``(B, d)``.

    ``want`` may also name ``"weights"`` for the mixture responsibilities.  The
    logits drop the per-row constant ``-|x|^2 / 2 sigma^2``, which cancels in
    the softmax and is added back only for the log-density.
    """
    n, d = points.shape
    centres = mu * points
    # spreads are taken about the centroid to limit cancellation
    origin = np.mean(centres, axis=0)
    rel = centres - origin
    s2 = sigma * sigma
    # logits in one product with homogeneous inputs: [c_i / s2, -|c_i|^2 / 2 s2] @ [x; 1]
    lift = np.hstack([centres / s2, -0.5 * np.sum(centres * centres, axis=1)[:, None] / s2])
    # weighted sums of rel, |rel|^2 and 1 in one product
    moments = np.vstack([rel.T, np.sum(rel * rel, axis=1), np.ones(n)])
    log_norm = -math.log(n) - 0.5 * d * math.log(2.0 * math.pi * s2)
    chunk = max(1, _CHUNK_ELEMS // n)
    b = x.shape[0]
    xa = np.empty((d + 1, b))
    xa[:d] = x.T
    xa[d] = 1.0
    out = {key: np.empty((b, n) if key == "weights" else (b, d) if key == "score" else b)
           for key in want}
    for start in range(0, b, chunk):
        sl = slice(start, min(start + chunk, b))
        # (N, B) layout: reductions over the mixture run along contiguous rows
        a = lift @ xa[:, sl]
        lmax = np.max(a, axis=0)
        a -= lmax
        np.exp(a, out=a)
        mom = moments @ a
        z = mom[d + 1]
        inv = 1.0 / z
        if "weights" in want:
            out["weights"][sl] = (a * inv).T
        if "log_density" in want:
            xb = x[sl]
            out["log_density"][sl] = (
                np.log(z) + lmax - 0.5 * np.sum(xb * xb, axis=1) / s2 + log_norm)
        if "score" in want or "laplacian" in want:
            mean_rel = mom[:d] * inv
            if "score" in want:
                out["score"][sl] = ((mean_rel - xa[:d, sl]).T + origin) / s2
            if "laplacian" in want:
                # Var_w(mu x_i) = E_w|c_i - o|^2 - |E_w c_i - o|^2
                spread = mom[d] * inv - np.sum(mean_rel * mean_rel, axis=0)
                out["laplacian"][sl] = -d / s2 + np.maximum(spread, 0.0) / (s2 * s2)
    return out


def evaluate(dataset: Dataset, schedule: NoiseSchedule, t: float, x,
             want: tuple = ("log_density", "score", "laplacian", "weights")) -> ScoreEvaluation:
    """Log-density, score, Laplacian and responsibilities in one pass."""
    x, mu, sigma = _check(dataset, schedule, t, x)
    lead = x.shape[:-1]
    res = evaluate_raw(dataset.points, mu, sigma, x.reshape(-1, dataset.dim), want)

    def shaped(key, tail=()):
        if key not in res:
            return None
        return res[key].reshape(lead + tail)

    return ScoreEvaluation(
        log_density=shaped("log_density"),
        score=shaped("score", (dataset.dim,)),
        laplacian=shaped("laplacian"),
        responsibilities=shaped("weights", (dataset.n,)),
    )


def _scalar(v):
    return float(v) if np.ndim(v) == 0 else v


def log_density(dataset: Dataset, schedule: NoiseSchedule, t: float, x):
    """``log p_t(x)`` for the noised empirical measure."""
    return _scalar(evaluate(dataset, schedule, t, x, want=("log_density",)).log_density)


def score(dataset: Dataset, schedule: NoiseSchedule, t: float, x) -> np.ndarray:
    """``grad log p_t(x) = sum_i w_i(x) (mu_t x_i - x) / sigma_t^2``."""
    return evaluate(dataset, schedule, t, x, want=("score",)).score


def score_divergence(dataset: Dataset, schedule: NoiseSchedule, t: float, x):
    """Laplacian of ``log p_t`` (divergence of the empirical score)."""
    return _scalar(evaluate(dataset, schedule, t, x, want=("laplacian",)).laplacian)


def responsibilities(dataset: Dataset, schedule: NoiseSchedule, t: float,
                     x) -> np.ndarray:
    return evaluate(dataset, schedule, t, x, want=("weights",)).responsibilities


def kde_log_density(dataset: Dataset, sigma: float, x, mu: float = 1.0,
                    noise_var: Optional[float] = None):
    """Log-density of the Gaussian KDE with bandwidth ``sigma``.

    ``noise_var`` adds an extra isotropic variance (e.g. ``sigma_eps^2``) so
    the KDE can be compared with an early-stopped diffusion.
    """
    var = sigma * sigma + (noise_var or 0.0)
    if not var > 0:
        raise DomainError("KDE bandwidth must be positive")
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    res = evaluate_raw(dataset.points, mu, math.sqrt(var), x.reshape(-1, dataset.dim),
                       want=("log_density",))
    return _scalar(res["log_density"].reshape(lead))
