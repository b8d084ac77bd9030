"""Noise schedules, datasets and diffusion configuration."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DomainError, ParseError

BINARY_MAGIC = b"GSC1"
_HEADER = struct.Struct("<4sII4x")  # 16 bytes: magic, N, d, reserved


# ---------------------------------------------------------------------------
# Noise schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process marginals ``X_t | X_0 ~ N(mu_t X_0, sigma_t^2 I)``.

    ``kind="ou"`` is the Ornstein-Uhlenbeck process ``dX = -alpha X dt +
    sqrt(2) dB`` (Brownian motion when ``alpha == 0``).  ``kind="ve_geometric"``
    is a variance-exploding process with ``sigma_t`` interpolating
    geometrically from ``sigma_min`` at ``t=0`` to ``sigma_max`` at ``t=T``.
    """

    kind: str = "ve_geometric"
    T: float = 9.0
    alpha: float = 0.0
    sigma_min: float = 0.01
    sigma_max: float = 1.0

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError("horizon T must be positive")
        if self.kind == "ou":
            if not self.alpha >= 0:
                raise ConfigError("OU schedule needs alpha >= 0")
        elif self.kind == "ve_geometric":
            if not 0 < self.sigma_min < self.sigma_max:
                raise ConfigError("VE schedule needs 0 < sigma_min < sigma_max")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def ou(cls, alpha: float = 0.0, T: float = 1.0) -> "NoiseSchedule":
        return cls(kind="ou", T=T, alpha=alpha)

    @classmethod
    def ve_geometric(cls, sigma_min: float = 0.01, sigma_max: float = 1.0,
                     T: float = 9.0) -> "NoiseSchedule":
        return cls(kind="ve_geometric", T=T, sigma_min=sigma_min, sigma_max=sigma_max)

    @classmethod
    def ve_for_dataset(cls, dataset: "Dataset", sigma_min: float = 0.01,
                       T: float = 9.0) -> "NoiseSchedule":
        """VE schedule with ``sigma_max`` twice the dataset diameter."""
        sigma_max = max(2.0 * dataset.diameter(), 2.0 * sigma_min)
        return cls.ve_geometric(sigma_min, sigma_max, T)

    # -- marginals ---------------------------------------------------------

    def check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(~np.isfinite(t)) or np.any(t <= 0) or np.any(t > self.T):
            raise DomainError(f"time must lie in (0, {self.T}], got {t}")

    def _mu(self, t):
        if self.kind == "ou":
            return np.exp(-self.alpha * t)
        return np.ones_like(t)

    def _sigma(self, t):
        if self.kind == "ou":
            if self.alpha > 0:
                return np.sqrt(-np.expm1(-2.0 * self.alpha * t) / self.alpha)
            return np.sqrt(2.0 * t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** (t / self.T)

    def mu_sigma(self, t):
        """Return ``(mu_t, sigma_t)``; accepts scalars or arrays of times."""
        self.check_time(t)
        t_arr = np.asarray(t, dtype=float)
        mu, sigma = self._mu(t_arr), self._sigma(t_arr)
        if t_arr.ndim == 0:
            return float(mu), float(sigma)
        return mu, sigma

    def drift_rate(self) -> float:
        """Coefficient ``a`` of the linear forward drift ``f(x) = -a x``."""
        return self.alpha if self.kind == "ou" else 0.0

    def diffusion_sq(self, t):
        """Squared diffusion coefficient ``g(t)^2`` of the forward SDE."""
        if self.kind == "ou":
            return 2.0 * np.ones_like(np.asarray(t, dtype=float))
        sigma = self._sigma(np.asarray(t, dtype=float))
        return 2.0 * sigma**2 * math.log(self.sigma_max / self.sigma_min) / self.T

    def prior_std(self) -> float:
        """Standard deviation of the centred Gaussian prior used at ``t=T``."""
        if self.kind == "ou":
            if self.alpha > 0:
                return 1.0 / math.sqrt(self.alpha)
            return math.sqrt(2.0 * self.T)
        return self.sigma_max

    def prior_log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        s2 = self.prior_std() ** 2
        return -0.5 * np.sum(x * x, axis=-1) / s2 - 0.5 * d * math.log(2 * math.pi * s2)

    def to_dict(self) -> dict:
        if self.kind == "ou":
            return {"kind": "ou", "alpha": self.alpha, "T": self.T}
        return {"kind": "ve_geometric", "sigma_min": self.sigma_min,
                "sigma_max": self.sigma_max, "T": self.T}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        data = dict(data)
        kind = data.pop("kind", "ve_geometric")
        allowed = {"ou": {"alpha", "T"}, "ve_geometric": {"sigma_min", "sigma_max", "T"}}
        if kind not in allowed:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        extra = set(data) - allowed[kind]
        if extra:
            raise ConfigError(f"unexpected schedule fields {sorted(extra)}")
        return cls(kind=kind, **{k: float(v) for k, v in data.items()})


def mu_sigma(schedule: NoiseSchedule, t):
    return schedule.mu_sigma(t)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """N training points in R^d, stored as a read-only ``(N, d)`` array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DomainError("dataset needs at least one point of positive dimension")
        if not np.all(np.isfinite(pts)):
            raise DomainError("dataset coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def diameter(self) -> float:
        pts = self.points
        best = 0.0
        sq = np.sum(pts * pts, axis=1)
        for start in range(0, len(pts), 512):
            blk = pts[start:start + 512]
            d2 = sq[start:start + 512, None] + sq[None, :] - 2.0 * blk @ pts.T
            best = max(best, float(np.max(d2)))
        return math.sqrt(max(best, 0.0))


def circle_dataset(n: int, radius: float = 1.0) -> Dataset:
    """``n`` points at angles ``2*pi*j/n`` on a centred circle."""
    if n < 1:
        raise DomainError("n must be >= 1")
    if not radius > 0:
        raise DomainError("radius must be positive")
    theta = 2.0 * np.pi * np.arange(n) / n
    return Dataset(radius * np.stack([np.cos(theta), np.sin(theta)], axis=1))


def _parse_csv(text: str, header: bool) -> np.ndarray:
    lines = text.splitlines()
    if header and lines:
        lines = lines[1:]
    rows = []
    width = None
    for idx, line in enumerate(lines):
        row_no = idx + (2 if header else 1)
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            values = [float(c) for c in cells]
        except ValueError:
            raise ParseError(f"non-numeric cell in {line!r}", row=row_no) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite value", row=row_no)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(f"expected {width} columns, found {len(values)}", row=row_no)
        rows.append(values)
    if not rows:
        raise ParseError("empty file")
    return np.array(rows, dtype=np.float64)


def load_dataset(path: Union[str, Path], format: Optional[str] = None,
                 header: bool = False) -> Dataset:
    """Read a dataset from ``csv_rows`` or ``f64_binary`` format.

    The format defaults to the file suffix: ``.bin``/``.gsc`` are binary,
    anything else is CSV.
    """
    path = Path(path)
    if format is None:
        format = "f64_binary" if path.suffix in (".bin", ".gsc") else "csv_rows"
    if format == "csv_rows":
        return Dataset(_parse_csv(path.read_text(), header))
    if format == "f64_binary":
        return Dataset(read_binary(path.read_bytes()))
    raise ConfigError(f"unknown dataset format {format!r}")


def read_binary(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ParseError("file shorter than header")
    magic, n, d = _HEADER.unpack_from(blob)
    if magic != BINARY_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if n < 1 or d < 1:
        raise ParseError("empty file")
    expected = _HEADER.size + 8 * n * d
    if len(blob) != expected:
        raise ParseError(f"expected {expected} bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(n, d)
    bad = np.flatnonzero(~np.all(np.isfinite(arr), axis=1))
    if bad.size:
        raise ParseError("non-finite value", row=int(bad[0]) + 1)
    return arr.astype(np.float64)


def format_csv(points: np.ndarray) -> str:
    # repr gives the shortest string that round-trips a double exactly
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in pts)


def save_points(points, path: Union[str, Path], format: Optional[str] = None) -> Path:
    path = Path(path)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if format is None:
        format = "f64_binary" if path.suffix in (".bin", ".gsc") else "csv_rows"
    if format == "csv_rows":
        path.write_text(format_csv(pts))
    elif format == "f64_binary":
        header = _HEADER.pack(BINARY_MAGIC, pts.shape[0], pts.shape[1])
        path.write_bytes(header + pts.astype("<f8").tobytes(order="C"))
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    return path


def save_dataset(dataset: Dataset, path, format: Optional[str] = None) -> Path:
    return save_points(dataset.points, path, format)


# ---------------------------------------------------------------------------
# Diffusion configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    n_steps: int = 100
    epsilon: float = 1e-3
    corrector_steps: int = 0
    corrector_snr: float = 0.16
    smoothing_samples: int = 1000
    time_grid: str = "uniform"

    def __post_init__(self):
        # n_steps == 0 is accepted as the degenerate "prior draw only" run
        if int(self.n_steps) != self.n_steps or self.n_steps < 0:
            raise ConfigError("n_steps must be a nonnegative integer")
        if not 0 < self.epsilon < self.schedule.T:
            raise ConfigError("epsilon must lie in (0, T)")
        if int(self.corrector_steps) != self.corrector_steps or self.corrector_steps < 0:
            raise ConfigError("corrector_steps must be a nonnegative integer")
        if not self.corrector_snr > 0:
            raise ConfigError("corrector_snr must be positive")
        if int(self.smoothing_samples) != self.smoothing_samples or self.smoothing_samples < 1:
            raise ConfigError("smoothing_samples must be a positive integer")
        if self.time_grid not in ("uniform", "log"):
            raise ConfigError("time_grid must be 'uniform' or 'log'")

    def times(self) -> np.ndarray:
        """Decreasing time grid from ``T`` to ``epsilon`` (``n_steps + 1`` points)."""
        T, eps = self.schedule.T, self.epsilon
        if self.time_grid == "log":
            ts = np.geomspace(T, eps, self.n_steps + 1)
        else:
            ts = np.linspace(T, eps, self.n_steps + 1)
        ts[0], ts[-1] = T, eps
        return ts

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schedule"] = self.schedule.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DiffusionConfig":
        data = dict(data)
        known = {"schedule", "n_steps", "epsilon", "corrector_steps", "corrector_snr",
                 "smoothing_samples", "time_grid"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unexpected config fields {sorted(extra)}")
        if "schedule" in data:
            sched = data["schedule"]
            data["schedule"] = sched if isinstance(sched, NoiseSchedule) else NoiseSchedule.from_dict(sched)
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiffusionConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)
