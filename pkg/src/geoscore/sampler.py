"""Reverse-SDE and probability-flow samplers driven by a smoothed score.

The forward process is ``dX = -a X dt + g(t) dB`` with ``a`` and ``g`` taken
from the schedule (``a = alpha, g^2 = 2`` for OU; ``a = 0, g^2 = d sigma_t^2/dt``
for VE).  The reverse-time SDE integrated here is

    dY = (a Y + g^2 s(t, Y)) dτ + g dB,

and the probability-flow ODE drift is ``-a x - g^2 s / 2``.

Each chain draws from its own ``("sde", chain)`` stream in a fixed order
(prior, then per step: smoothing noise, predictor noise, corrector draws),
and chains are grouped into fixed blocks, so outputs are bit-identical for
any number of workers.  Without correctors every chain is independent of the
block layout; the corrector step size is shared within a block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .core import Dataset, DiffusionConfig
from .errors import DomainError, NumericalError
from .parallel import chunked, map_ordered
from .rng import RngSeed
from .smoothing import SmoothedScoreModel

SeedLike = Union[int, RngSeed, np.random.Generator]

DEFAULT_BLOCK = 256


def as_seed(rng: SeedLike) -> RngSeed:
    if isinstance(rng, RngSeed):
        return rng
    if isinstance(rng, np.random.Generator):
        return RngSeed(int(rng.integers(0, 2**63)))
    return RngSeed(int(rng))


@dataclass
class Trajectory:
    """States along a fixed time grid, in integration order.

    ``states`` has shape ``(len(times), d)`` for one start point or
    ``(len(times), B, d)`` for a batch.
    """

    times: np.ndarray
    states: np.ndarray
    log_det_accum: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise DomainError("times and states differ in length")
        steps = np.diff(self.times)
        if steps.size and not (np.all(steps < 0) or np.all(steps > 0)):
            raise DomainError("trajectory times must be strictly monotone")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _check_finite(x: np.ndarray, chains, step: int, t: float):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        chain = chains[int(np.argmax(bad))]
        raise NumericalError(f"chain {chain}: non-finite state at step {step} (t={t:.6g})")


def _corrector_pass(model, t, x, steps, snr, gens):
    """Langevin updates at time ``t``; one generator per row of ``x``."""
    d = x.shape[1]
    for _ in range(steps):
        noise = model.draw_noise_batch(gens)
        s = model.score(t, x, noise=noise)
        z = np.stack([g.standard_normal(d) for g in gens])
        # norms averaged over the rows: a per-row ratio blows up next to a mode
        s_norm = float(np.mean(np.linalg.norm(s, axis=1)))
        if not s_norm > 0:
            continue
        z_norm = float(np.mean(np.linalg.norm(z, axis=1)))
        delta = 2.0 * (snr * z_norm / s_norm) ** 2
        x = x + delta * s + math.sqrt(2.0 * delta) * z
    return x


def langevin_corrector(model: SmoothedScoreModel, t: float, x, steps: int, snr: float,
                       rng) -> np.ndarray:
    """Iterate ``x <- x + δ s + sqrt(2δ) z`` with ``δ = 2 (snr |z| / |s|)^2``.

    The norms are averaged over the rows of ``x``, so rows are coupled
    through the step size.  ``rng`` is a generator shared by all rows, or a
    list with one per row.  A step is skipped when every score vanishes.
    """
    if steps < 0:
        raise DomainError("steps must be nonnegative")
    if snr < 0:
        raise DomainError("snr must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if steps == 0 or snr == 0:
        return x.copy()
    gens = rng if isinstance(rng, (list, tuple)) else [rng] * xb.shape[0]
    out = _corrector_pass(model, t, xb, steps, snr, gens)
    return out[0] if single else out


def chain_generators(root: RngSeed, chains) -> list:
    return [root.child("sde", int(c)).generator() for c in chains]


def prior_sample(config: DiffusionConfig, d: int, gens) -> np.ndarray:
    std = config.schedule.prior_std()
    return np.stack([std * g.standard_normal(d) for g in gens])


def _run_block(model, config, chains, root, keep):
    sched = config.schedule
    times = config.times() if config.n_steps > 0 else np.array([config.epsilon])
    a = sched.drift_rate()
    d = model.dim
    gens = chain_generators(root, chains)
    x = prior_sample(config, d, gens)
    path = [x] if keep else None
    for k in range(len(times) - 1):
        t, t_next = float(times[k]), float(times[k + 1])
        dt = t - t_next
        noise = model.draw_noise_batch(gens)
        s = model.score(t, x, noise=noise)
        z = np.stack([g.standard_normal(d) for g in gens])
        g2 = float(sched.diffusion_sq(t))
        x = x + (a * x + g2 * s) * dt + math.sqrt(g2 * dt) * z
        _check_finite(x, chains, k, t)
        if config.corrector_steps:
            x = _corrector_pass(model, t_next, x, config.corrector_steps,
                                config.corrector_snr, gens)
            _check_finite(x, chains, k, t_next)
        if keep:
            path.append(x)
    return x, (np.stack(path) if keep else None), times


def reverse_sde_sample(model: SmoothedScoreModel, config: DiffusionConfig, n: int,
                       rng: SeedLike, *, chain_start: int = 0, block: int = DEFAULT_BLOCK,
                       workers=None, return_trajectory: bool = False):
    """Draw ``n`` chains of the reverse SDE from the prior at ``T`` down to ``epsilon``.

    Returns an ``(n, d)`` array, or a :class:`Trajectory` over all chains when
    ``return_trajectory`` is set.  With ``n_steps == 0`` the prior draws are
    returned unchanged.
    """
    if n < 0:
        raise DomainError("n must be nonnegative")
    root = as_seed(rng)
    chains = list(range(chain_start, chain_start + n))
    if n == 0:
        return np.zeros((0, model.dim))
    parts = map_ordered(lambda cs: _run_block(model, config, cs, root, return_trajectory),
                        chunked(chains, block), workers)
    samples = np.concatenate([p[0] for p in parts], axis=0)
    if not return_trajectory:
        return samples
    return Trajectory(times=parts[0][2], states=np.concatenate([p[1] for p in parts], axis=1))


# ---------------------------------------------------------------------------
# Probability-flow ODE
# ---------------------------------------------------------------------------


def pf_drift(model: SmoothedScoreModel, t: float, x: np.ndarray, noise=None):
    """PF-ODE drift and its exact divergence at ``(t, x)``."""
    sched = model.schedule
    a = sched.drift_rate()
    g2 = float(sched.diffusion_sq(t))
    s, lap = model.score_and_divergence(t, x, noise)
    return -a * x - 0.5 * g2 * s, -a * x.shape[1] - 0.5 * g2 * lap


def pf_ode_noise(model: SmoothedScoreModel, n_points: int, rng: SeedLike, start: int = 0):
    """Smoothing noise held fixed along each point's trajectory."""
    if model.deterministic:
        return None
    root = as_seed(rng)
    return model.draw_noise_batch(
        [root.child("pf_ode", i).generator() for i in range(start, start + n_points)])


def pf_ode_solve(model: SmoothedScoreModel, config: DiffusionConfig, x_start,
                 direction: str = "forward", rng: Optional[SeedLike] = None,
                 noise=None) -> Trajectory:
    """Heun integration of the probability-flow ODE on the config's time grid.

    ``forward`` runs from ``epsilon`` to ``T``; ``reverse`` from ``T`` to
    ``epsilon``.  ``log_det_accum`` is ``∫ div(drift) dt`` with ``dt`` signed
    by the direction of travel.  Monte Carlo smoothing noise is drawn once per
    start point and reused at every time, so the drift is a fixed smooth
    vector field and its divergence is exact.
    """
    if direction not in ("forward", "reverse"):
        raise DomainError("direction must be 'forward' or 'reverse'")
    x = np.asarray(x_start, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x).copy()
    model._require_commuting()
    model._direct_only("PF-ODE divergence")
    if noise is None and not model.deterministic:
        if rng is None:
            raise DomainError("Monte Carlo smoothing needs an rng or fixed noise")
        noise = pf_ode_noise(model, xb.shape[0], rng)
    times = config.times() if config.n_steps > 0 else np.array([config.epsilon])
    if direction == "forward":
        times = times[::-1].copy()
    logdet = np.zeros(xb.shape[0])
    states = [xb]
    for k in range(len(times) - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        h = t1 - t0
        f0, div0 = pf_drift(model, t0, xb, noise)
        x_pred = xb + h * f0
        f1, div1 = pf_drift(model, t1, x_pred, noise)
        xb = xb + 0.5 * h * (f0 + f1)
        logdet = logdet + 0.5 * h * (div0 + div1)
        if not np.all(np.isfinite(xb)):
            raise NumericalError(f"PF-ODE state non-finite at step {k} (t={t1:.6g})")
        states.append(xb)
    states = np.stack(states)
    if single:
        return Trajectory(times, states[:, 0, :], float(logdet[0]))
    return Trajectory(times, states, logdet)


def pf_log_likelihood(model: SmoothedScoreModel, config: DiffusionConfig, x,
                      rng: Optional[SeedLike] = None, noise=None) -> np.ndarray:
    """``log p_eps(x)`` via the forward PF-ODE and the schedule prior."""
    traj = pf_ode_solve(model, config, np.atleast_2d(x), "forward", rng=rng, noise=noise)
    return config.schedule.prior_log_density(traj.final) + traj.log_det_accum


# ---------------------------------------------------------------------------
# KDE baseline
# ---------------------------------------------------------------------------


def kde_sample(dataset: Dataset, sigma: float, n: int, rng: SeedLike) -> np.ndarray:
    """Exact draws from the Gaussian KDE: a uniform training point plus N(0, σ² I)."""
    if not sigma >= 0:
        raise DomainError("KDE bandwidth must be nonnegative")
    g = rng if isinstance(rng, np.random.Generator) else as_seed(rng).child("kde").generator()
    idx = g.integers(0, dataset.n, size=n)
    return dataset.points[idx] + sigma * g.standard_normal((n, dataset.dim))
