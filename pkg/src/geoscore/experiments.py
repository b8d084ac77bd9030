"""Config-driven experiment scenarios and their run reports."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .analysis import (Grid, RenyiOrder, affine_residual, anisotropy, dist_to_set, eval_grid,
                       lateral_details, nll_values, renyi_details, write_metrics_csv)
from .core import DiffusionConfig, Dataset, NoiseSchedule, load_dataset, save_points
from .errors import ConfigError, GeoscoreError
from .kernels import (AnisotropicGaussian, IsotropicGaussian, LevelSetAdapted, ShiftedManifoldAdapted,
                      kernel_from_dict)
from .manifolds import Affine, BumpCurve, Circle, Manifold, WavyCircle, manifold_from_dict
from .parallel import map_ordered
from .rng import RngSeed
from .sampler import kde_sample, reverse_sde_sample
from .smoothing import SmoothedScoreModel
from .svg import emit_svg_lines, emit_svg_scatter

EXPERIMENTS = ("circle_nll_sweep", "kde_vs_score", "manifold_choice", "bump_manifold",
               "affine_verify", "renyi_sweep", "custom")


class StageError(GeoscoreError):
    """A scenario stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage, self.cause = stage, cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str
    dataset: dict = field(default_factory=dict)
    kernels: list = field(default_factory=list)
    diffusion: dict = field(default_factory=dict)
    outdir: str = "runs"
    seed: int = 0
    replicates: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}; choose from {EXPERIMENTS}")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise ConfigError("replicates must be a positive integer")
        for spec in self.kernels:
            for key, value in spec.items():
                if isinstance(value, list) and key not in ("directions", "center") and not value:
                    raise ConfigError(f"swept kernel parameter {key!r} is empty")

    def to_dict(self) -> dict:
        return {"name": self.name, "dataset": self.dataset, "kernels": self.kernels,
                "diffusion": self.diffusion, "outdir": self.outdir, "seed": self.seed,
                "replicates": self.replicates, "params": self.params}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"name", "dataset", "kernels", "diffusion", "outdir", "seed", "replicates", "params"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unexpected experiment fields {sorted(extra)}")
        if "name" not in data:
            raise ConfigError("experiment config needs a name")
        return cls(**copy.deepcopy(data))

    def config_hash(self) -> str:
        body = dict(self.to_dict())
        body.pop("outdir")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# Desk-scale defaults; ``FULL`` entries restore the full-scale sample counts.
DEFAULTS = {
    "circle_nll_sweep": dict(
        dataset={"kind": "circle", "n": 12},
        kernels=[{"kind": "IsotropicGaussian", "sigma": [0.02, 0.05, 0.1, 0.15, 0.2, 0.3]}],
        diffusion={"schedule": "auto", "n_steps": 100, "smoothing_samples": 1000},
        replicates=5, params={"n_eval": 200, "n_generate": 100}),
    "kde_vs_score": dict(
        dataset={"kind": "circle", "n": 12},
        kernels=[{"kind": "IsotropicGaussian", "sigma": [0.05, 0.1, 0.15, 0.2]}],
        diffusion={"schedule": "auto", "n_steps": 100, "smoothing_samples": 1000},
        replicates=5, params={"n_generate": 100, "kde_sigma": "calibrate"}),
    "manifold_choice": dict(
        dataset={"kind": "wavy_circle", "n": 16, "amplitude": 0.15, "frequency": 8},
        kernels=[{"kind": "IsotropicGaussian", "sigma": [0.01, 0.04, 0.12]}],
        diffusion={"schedule": {"kind": "ou", "alpha": 0.0, "T": 1.0}, "epsilon": 0.00125},
        replicates=5, params={"grid_resolution": 128, "grid_bound": 1.6,
                              "smoothing_samples": 256}),
    "bump_manifold": dict(
        dataset={"kind": "bump", "eta": [0.2], "n": 16, "side": 64},
        kernels=[{"kind": "IsotropicGaussian", "sigma": [1.0, 1.8, 2.6], "samples": 5000},
                 {"kind": "ShiftedManifoldAdapted", "sigma": [1.6, 3.2, 5.0],
                  "manifold": "data", "samples": 1000}],
        diffusion={"schedule": "auto", "n_steps": 100},
        replicates=3, params={"n_generate": 32}),
    "affine_verify": dict(
        dataset={"kind": "line", "n": 5, "patch": [-1.5, 1.5], "offset": 0.3},
        kernels=[{"kind": "FixedStencil", "h": [0.1]}],
        diffusion={"schedule": "auto", "epsilon": 0.01},
        replicates=1, params={"grid_resolution": 64, "grid_bound": 2.0, "tolerance": 1e-8}),
    "renyi_sweep": dict(
        dataset={"kind": "circle", "n": 12},
        kernels=[{"kind": "IsotropicGaussian", "sigma": [0.02, 0.06, 0.12]}],
        diffusion={"schedule": {"kind": "ou", "alpha": 0.0, "T": 1.0}, "epsilon": 0.00125},
        replicates=5, params={"grid_resolution": 128, "grid_bound": 1.5,
                              "smoothing_samples": 256, "orders": [1.0, 2.0]}),
    "custom": dict(
        dataset={}, kernels=[{"kind": "IsotropicGaussian", "sigma": [0.0]}],
        diffusion={"schedule": "auto", "n_steps": 100, "smoothing_samples": 1000},
        replicates=1, params={"n_generate": 100, "save_samples": True}),
}

FULL = {
    "circle_nll_sweep": {"params": {"n_eval": 1000, "n_generate": 500}},
    "kde_vs_score": {"params": {"n_generate": 500}},
    "manifold_choice": {"params": {"grid_resolution": 256, "smoothing_samples": 1000}},
    "bump_manifold": {
        "kernels": [{"kind": "IsotropicGaussian", "sigma": [1.0, 1.4, 1.8, 2.0, 2.2, 2.4, 2.6],
                     "samples": 50000},
                    {"kind": "ShiftedManifoldAdapted", "sigma": [1.6, 2.4, 3.2, 3.5, 3.8, 4.4, 5.0],
                     "manifold": "data", "samples": 1000}],
        "params": {"n_generate": 100}},
    "renyi_sweep": {"params": {"grid_resolution": 256, "smoothing_samples": 1000}},
}


def default_config(name: str, full: bool = False, **overrides) -> ExperimentConfig:
    """Scenario defaults, optionally at full scale, with field overrides."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    base = copy.deepcopy(DEFAULTS[name])
    if full:
        for key, value in copy.deepcopy(FULL.get(name, {})).items():
            if isinstance(value, dict):
                base.setdefault(key, {}).update(value)
            else:
                base[key] = value
    for key, value in overrides.items():
        if key in ("params", "diffusion", "dataset") and isinstance(value, dict):
            base.setdefault(key, {}).update(value)
        else:
            base[key] = value
    return ExperimentConfig(name=name, **base)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _circle_points(n: int, radius: float = 1.0, offset: float = 0.0) -> np.ndarray:
    theta = 2.0 * np.pi * (np.arange(n) + offset) / n
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def build_dataset(spec: dict, eta: Optional[float] = None):
    """Return ``(Dataset, Manifold or None)`` for a dataset description."""
    spec = dict(spec)
    kind = spec.get("kind")
    if kind == "circle":
        m = Circle(spec.get("radius", 1.0))
        return Dataset(_circle_points(int(spec.get("n", 12)), m.radius)), m
    if kind == "wavy_circle":
        m = WavyCircle(spec.get("R", 1.0), spec.get("amplitude", 0.15), spec.get("frequency", 8))
        return Dataset(m.sample_uniform(int(spec.get("n", 16)), None, equispaced=True)), m
    if kind == "bump":
        m = BumpCurve(eta if eta is not None else spec.get("eta", 0.2), spec.get("side", 64))
        return Dataset(m.sample_uniform(int(spec.get("n", 16)), None, equispaced=True)), m
    if kind == "line":
        lo, hi = spec.get("patch", [-1.5, 1.5])
        a = np.array([[1.0, -1.0]]) / math.sqrt(2.0)
        m = Affine(a, [spec.get("offset", 0.0)], patch=[(lo, hi)])
        return Dataset(m.sample_uniform(int(spec.get("n", 5)), None, equispaced=True)), m
    if kind == "file":
        if "path" not in spec:
            raise ConfigError("file dataset needs a path")
        ds = load_dataset(spec["path"], spec.get("format"), header=bool(spec.get("header", False)))
        m = manifold_from_dict(spec["manifold"]) if spec.get("manifold") else None
        return ds, m
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_schedule(diffusion: dict, dataset: Dataset) -> NoiseSchedule:
    sched = diffusion.get("schedule", "auto")
    if sched == "auto":
        return NoiseSchedule.ve_for_dataset(dataset, diffusion.get("sigma_min", 0.01),
                                            diffusion.get("T", 9.0))
    if isinstance(sched, dict):
        return NoiseSchedule.from_dict(sched)
    raise ConfigError(f"unrecognised schedule {sched!r}")


def build_diffusion(diffusion: dict, dataset: Dataset) -> DiffusionConfig:
    fields = {k: v for k, v in diffusion.items() if k not in ("schedule", "sigma_min", "T")}
    return DiffusionConfig.from_dict({**fields, "schedule": build_schedule(diffusion, dataset)})


def expand_sweep(spec: dict) -> list:
    """Concrete kernel specs, one per combination of list-valued parameters."""
    swept = [(k, v) for k, v in spec.items()
             if isinstance(v, list) and k not in ("directions", "center")]
    out = [dict(spec)]
    for key, values in swept:
        out = [{**item, key: value} for item in out for value in values]
    return out


def build_kernel(spec: dict, manifold: Optional[Manifold]):
    """Kernel from a concrete spec; ``"manifold": "data"`` means the data manifold."""
    spec = {k: v for k, v in spec.items() if k != "samples"}
    kind = spec.get("kind")
    if kind in (None, "none"):
        return None
    target = spec.get("manifold", spec.get("frame_source"))
    if target == "data":
        if manifold is None:
            raise ConfigError(f"kernel {kind} refers to the data manifold, but none is known")
        target = manifold
    elif isinstance(target, dict):
        target = manifold_from_dict(target)
    if kind == "ShiftedManifoldAdapted":
        if "sigma" not in spec or target is None:
            raise ConfigError("ShiftedManifoldAdapted needs sigma and manifold")
        return ShiftedManifoldAdapted(float(spec["sigma"]), target,
                                      int(spec.get("n_proj_nodes", 1024)))
    if kind == "LevelSetAdapted":
        base = spec.get("base")
        if not isinstance(base, dict) or target is None:
            raise ConfigError("LevelSetAdapted needs a base kernel and a manifold")
        return LevelSetAdapted(kernel_from_dict(base), target,
                               float(spec.get("epsilon_scale", 1.0)))
    if kind == "AnisotropicGaussian" and isinstance(target, Manifold):
        return AnisotropicGaussian(float(spec["sigma_tangent"]), float(spec["sigma_normal"]),
                                   target)
    return kernel_from_dict(spec)


def kernel_label(spec: dict) -> str:
    return json.dumps({k: v for k, v in spec.items() if k != "samples"}, sort_keys=True,
                      default=str)


def sample_metrics(x: np.ndarray, dataset: Dataset, manifold: Optional[Manifold]) -> dict:
    out = {"dist_to_data_mean": float(np.mean(dist_to_set(x, dataset.points)))}
    if manifold is not None:
        dm = manifold.distance(x)
        lat = lateral_details(x, dataset, manifold)
        out["dist_to_manifold_mean"] = float(np.mean(dm))
        out["lateral_mean"] = float(np.mean(lat.value))
        out["lateral_clamped"] = int(np.sum(lat.clamped))
    return out


def replicate_seed(config: ExperimentConfig, r: int) -> RngSeed:
    # shared by every sweep point so replicates pair across sigma
    return RngSeed(int(config.seed), (config.name, "replicate", r))


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    name: str
    rows: list
    columns: list
    provenance: dict
    timings: dict
    summary: dict
    outdir: Path
    files: list = field(default_factory=list)
    error: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"name": self.name, "rows": self.rows, "columns": self.columns,
                "provenance": self.provenance, "timings": self.timings, "summary": self.summary,
                "files": [str(Path(f).name) for f in self.files], "error": self.error}


def build_id() -> str:
    """Git-style blob hash over the package sources."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        data = path.read_bytes()
        h.update(f"blob {len(data)}\0".encode() + data)
    return f"{__version__}+{h.hexdigest()[:12]}"


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


class _Run:
    def __init__(self, config: ExperimentConfig, outdir: Optional[Path] = None):
        self.config = config
        self.outdir = outdir if outdir is not None else _fresh_dir(config)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.rows: list = []
        self.columns: list = []
        self.timings: dict = {}
        self.summary: dict = {}
        self.files: list = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            self.timings[name] = time.perf_counter() - start
            self.flush(error={"stage": name, "type": type(exc).__name__, "message": str(exc)})
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - start

    def report(self, error=None) -> RunReport:
        cfg = self.config
        prov = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "build_id": build_id(),
                "config": cfg.to_dict()}
        return RunReport(cfg.name, self.rows, self.columns, prov, dict(self.timings),
                         self.summary, self.outdir, list(self.files), error)

    def flush(self, error=None) -> RunReport:
        csv_path = self.outdir / "metrics.csv"
        write_metrics_csv(self.rows, csv_path, extra=self.columns)
        if csv_path not in self.files:
            self.files.append(csv_path)
        rep = self.report(error)
        (self.outdir / "report.json").write_text(
            json.dumps(rep.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
        return rep


def _fresh_dir(config: ExperimentConfig) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = Path(config.outdir) / config.name
    out = base / stamp
    k = 1
    while out.exists():
        out = base / f"{stamp}-{k}"
        k += 1
    return out


def run(config: ExperimentConfig, outdir: Optional[Path] = None, workers=None) -> RunReport:
    """Execute a scenario and write CSV, JSON report and SVG plots."""
    job = _Run(config, outdir)
    SCENARIOS[config.name](job, workers)
    return job.flush()


def _tasks(config: ExperimentConfig, specs: list) -> list:
    return [(i, spec, r) for i, spec in enumerate(specs) for r in range(config.replicates)]


def _median_by(rows, key: str, value: str) -> dict:
    """Median of ``value`` over rows grouped by ``key``."""
    groups: dict = {}
    for row in rows:
        if row.get(value) is None:
            continue
        groups.setdefault(row[key], []).append(row[value])
    return {k: float(np.median(v)) for k, v in groups.items()}


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def _circle_nll_sweep(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        dcfg = build_diffusion(cfg.diffusion, ds)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        n_eval = int(p.get("n_eval", 200))
        eval_pts = man.point((np.arange(n_eval) + 0.5) / n_eval * 2 * np.pi)
        n_gen = int(p.get("n_generate", 0))
    samples = {}

    def one(task):
        i, spec, r = task
        seed = replicate_seed(cfg, r)
        kernel = build_kernel(spec, man)
        model = SmoothedScoreModel(ds, dcfg.schedule, kernel,
                                   int(spec.get("samples", dcfg.smoothing_samples)))
        row = {"sigma": spec.get("sigma"), "replicate": r, "kernel": kernel_label(spec)}
        row["nll"] = float(np.mean(nll_values(model, dcfg, eval_pts, rng=seed.child("nll"))))
        if n_gen:
            x = reverse_sde_sample(model, dcfg, n_gen, seed.child("generate"))
            row.update(sample_metrics(x, ds, man))
            if r == 0:
                samples[i] = x
        return row

    with job.stage("sweep"):
        job.columns = ["replicate", "kernel", "lateral_clamped"]
        job.rows = map_ordered(one, _tasks(cfg, specs), workers)
    with job.stage("summary"):
        med = _median_by(job.rows, "sigma", "nll")
        sig = sorted(med)
        vals = [med[s] for s in sig]
        best = int(np.argmin(vals))
        job.summary = {"median_nll": {repr(s): v for s, v in zip(sig, vals)},
                       "argmin_sigma": sig[best],
                       "interior_minimum": bool(0 < best < len(sig) - 1
                                                and vals[best] < vals[0] and vals[best] < vals[-1])}
    with job.stage("plots"):
        job.files.append(emit_svg_lines([{"x": sig, "y": vals, "label": "median NLL"}],
                                        job.outdir / "nll_vs_sigma.svg", "smoothing sigma",
                                        "NLL (nats)", "population NLL"))
        for i, x in sorted(samples.items()):
            path = job.outdir / f"samples_{i:02d}.svg"
            job.files.append(emit_svg_scatter(
                [{"points": x, "label": "generated", "marker": "dot"},
                 {"points": ds.points, "label": "training", "marker": "triangle",
                  "color": "#c0392b"}], path, title=f"sigma = {specs[i].get('sigma')}"))


def calibrate_kde_bandwidth(dataset: Dataset, target: float, rng: RngSeed, n: int,
                            iters: int = 60) -> float:
    """Bandwidth whose ``kde_sample(dataset, h, n, rng)`` draws have mean
    distance-to-data ``target``.

    The training indices and unit normals are the ones ``kde_sample`` will
    use, so the bisection runs on a deterministic, continuous function of
    the bandwidth and the matched sample hits the target to bisection
    precision.
    """
    g = rng.child("kde").generator()
    idx = g.integers(0, dataset.n, size=n)
    z = g.standard_normal((n, dataset.dim))
    base = dataset.points[idx]

    def mean_dist(h):
        return float(np.mean(dist_to_set(base + h * z, dataset.points)))

    lo, hi = 0.0, max(dataset.diameter(), 1e-3)
    while mean_dist(hi) < target:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigError("cannot reach the target distance with any bandwidth")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if mean_dist(mid) < target else (lo, mid)
    return 0.5 * (lo + hi)


def _kde_vs_score(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        if man is None:
            raise ConfigError("kde_vs_score needs a dataset with a known manifold")
        dcfg = build_diffusion(cfg.diffusion, ds)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        n_gen = int(p.get("n_generate", 100))
        kde_sigma = p.get("kde_sigma", "calibrate")
        if kde_sigma != "calibrate" and len(kde_sigma) != len(specs):
            raise ConfigError("kde_sigma needs one bandwidth per score sweep point")

    def one(task):
        i, spec, r = task
        seed = replicate_seed(cfg, r)
        model = SmoothedScoreModel(ds, dcfg.schedule, build_kernel(spec, man),
                                   int(spec.get("samples", dcfg.smoothing_samples)))
        x = reverse_sde_sample(model, dcfg, n_gen, seed.child("generate"))
        row = {"sigma": spec.get("sigma"), "point": i, "replicate": r,
               "kernel": kernel_label(spec), **sample_metrics(x, ds, man)}
        if kde_sigma == "calibrate":
            h = calibrate_kde_bandwidth(ds, row["dist_to_data_mean"], seed.child("kde", i), n_gen)
        else:
            h = float(kde_sigma[i])
        y = kde_sample(ds, h, n_gen, seed.child("kde", i))
        km = sample_metrics(y, ds, man)
        row.update({"kde_sigma": h, "kde_dist_to_data_mean": km["dist_to_data_mean"],
                    "kde_dist_to_manifold_mean": km["dist_to_manifold_mean"]})
        row["manifold_ratio"] = row["dist_to_manifold_mean"] / km["dist_to_manifold_mean"]
        row["data_agree"] = int(abs(row["dist_to_data_mean"] - km["dist_to_data_mean"])
                                <= 0.1 * km["dist_to_data_mean"])
        return row

    with job.stage("sweep"):
        job.columns = ["point", "replicate", "kernel", "kde_sigma", "kde_dist_to_data_mean",
                       "kde_dist_to_manifold_mean", "manifold_ratio", "data_agree",
                       "lateral_clamped"]
        job.rows = map_ordered(one, _tasks(cfg, specs), workers)
    with job.stage("summary"):
        ratio = _median_by(job.rows, "point", "manifold_ratio")
        agree = {i: all(x["data_agree"] for x in job.rows if x["point"] == i)
                 for i in range(len(specs))}
        job.summary = {"median_manifold_ratio": {str(k): v for k, v in ratio.items()},
                       "dist_to_data_agree": {str(i): v for i, v in agree.items()},
                       "matched_points": [i for i in agree if agree[i]]}
    with job.stage("plots"):
        series = []
        for label, dd_key, dm_key in (("score smoothing", "dist_to_data_mean",
                                       "dist_to_manifold_mean"),
                                      ("KDE", "kde_dist_to_data_mean",
                                       "kde_dist_to_manifold_mean")):
            dd = _median_by(job.rows, "point", dd_key)
            dm = _median_by(job.rows, "point", dm_key)
            keys = sorted(dd)
            series.append({"x": [dd[k] for k in keys], "y": [dm[k] for k in keys],
                           "label": label})
        job.files.append(emit_svg_lines(series, job.outdir / "manifold_vs_data.svg",
                                        "mean distance to data", "mean distance to manifold"))


def _grid_for(p: dict, dim: int = 2) -> Grid:
    b = float(p.get("grid_bound", 1.5))
    return Grid.square(-b, b, int(p.get("grid_resolution", 128)), dim)


def _adapted_divergence(ds, sched, eps, base_sigma, manifold, grid, noise_rng, n_samples, orders):
    base = IsotropicGaussian(base_sigma)
    iso = SmoothedScoreModel(ds, sched, base, n_samples)
    adapted = SmoothedScoreModel(ds, sched, LevelSetAdapted(base, manifold), n_samples)
    noise = iso.draw_noise(noise_rng)
    p_iso = eval_grid(iso, eps, grid, noise=noise)
    p_ad = eval_grid(adapted, eps, grid, noise=noise)
    return {q: renyi_details(p_ad, p_iso, RenyiOrder(q)) for q in orders}


def _renyi_sweep(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        dcfg = build_diffusion(cfg.diffusion, ds)
        grid = _grid_for(p)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        orders = [float(q) for q in p.get("orders", [1.0, 2.0])]
        mu_eps, _ = dcfg.schedule.mu_sigma(dcfg.epsilon)

    def one(task):
        i, spec, r = task
        seed = replicate_seed(cfg, r)
        res = _adapted_divergence(ds, dcfg.schedule, dcfg.epsilon, float(spec["sigma"]),
                                  man.scaled(mu_eps), grid, seed.child("noise").generator(),
                                  int(p.get("smoothing_samples", 256)), orders)
        row = {"sigma": spec["sigma"], "replicate": r, "kernel": kernel_label(spec),
               "d2_renyi": res[2.0].value if 2.0 in res else None,
               "floored_cells": sum(v.floored_cells for v in res.values())}
        for q, v in res.items():
            if q != 2.0:
                row[f"d{q:g}_renyi"] = v.value
        return row

    with job.stage("sweep"):
        job.rows = map_ordered(one, _tasks(cfg, specs), workers)
        job.columns = ["replicate", "kernel"] + sorted(
            {k for row in job.rows for k in row if k.endswith("_renyi") and k != "d2_renyi"}) \
            + ["floored_cells"]
    with job.stage("summary"):
        med = _median_by(job.rows, "sigma", "d2_renyi")
        sig = sorted(med)
        vals = [med[s] for s in sig]
        job.summary = {"median_d2": {repr(s): v for s, v in zip(sig, vals)},
                       "nondecreasing": bool(all(b >= a for a, b in zip(vals, vals[1:])))}
    with job.stage("plots"):
        job.files.append(emit_svg_lines([{"x": sig, "y": vals, "label": "median D2"}],
                                        job.outdir / "renyi_vs_sigma.svg", "smoothing sigma",
                                        "D2(adapted || isotropic)"))


def fitted_circle(points: np.ndarray) -> Circle:
    """Circle through the centroid with the mean distance as radius."""
    c = points.mean(axis=0)
    return Circle(float(np.mean(np.linalg.norm(points - c, axis=1))), tuple(c))


def _manifold_choice(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        if man is None or ds.dim != 2:
            raise ConfigError("manifold_choice needs planar data with a known curve")
        dcfg = build_diffusion(cfg.diffusion, ds)
        grid = _grid_for(p)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        mu_eps, _ = dcfg.schedule.mu_sigma(dcfg.epsilon)
        coarse = man.base_circle() if isinstance(man, WavyCircle) else fitted_circle(ds.points)
        candidates = {"curve": man, "circle": coarse}

    def one(task):
        i, spec, r = task
        seed = replicate_seed(cfg, r)
        row = {"sigma": spec["sigma"], "replicate": r, "kernel": kernel_label(spec)}
        for label, cand in candidates.items():
            res = _adapted_divergence(ds, dcfg.schedule, dcfg.epsilon, float(spec["sigma"]),
                                      cand.scaled(mu_eps), grid, seed.child("noise").generator(),
                                      int(p.get("smoothing_samples", 256)), [2.0])
            row[f"d2_{label}"] = res[2.0].value
        return row

    with job.stage("sweep"):
        job.columns = ["replicate", "kernel", "d2_curve", "d2_circle"]
        job.rows = map_ordered(one, _tasks(cfg, specs), workers)
    with job.stage("summary"):
        curve = _median_by(job.rows, "sigma", "d2_curve")
        circ = _median_by(job.rows, "sigma", "d2_circle")
        sig = sorted(curve)
        prefer = {repr(s): ("curve" if curve[s] < circ[s] else "circle") for s in sig}
        job.summary = {"median_d2_curve": {repr(s): curve[s] for s in sig},
                       "median_d2_circle": {repr(s): circ[s] for s in sig},
                       "preferred": prefer}
    with job.stage("plots"):
        xs = list(sig)
        job.files.append(emit_svg_lines(
            [{"x": xs, "y": [curve[s] for s in sig], "label": "curve-adapted"},
             {"x": xs, "y": [circ[s] for s in sig], "label": "circle-adapted"}],
            job.outdir / "manifold_choice.svg", "smoothing sigma", "median D2"))


def matched_comparison(reference: list, candidate: list) -> Optional[float]:
    """Mean of ``candidate - reference`` values at matched distance-to-data.

    Both arguments are lists of ``(dist_to_data, value)`` pairs; the candidate
    curve is linearly interpolated at every reference point inside its range.
    ``None`` when no reference point falls inside the candidate range.
    """
    cand = sorted(candidate)
    cx = np.array([c[0] for c in cand])
    cy = np.array([c[1] for c in cand])
    diffs = [float(np.interp(x, cx, cy)) - y for x, y in reference if cx[0] <= x <= cx[-1]]
    return float(np.mean(diffs)) if diffs else None


def _bump_manifold(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        etas = cfg.dataset.get("eta", [0.2])
        etas = etas if isinstance(etas, list) else [etas]
        data = {float(eta): build_dataset(cfg.dataset, eta=float(eta)) for eta in etas}
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        n_gen = int(p.get("n_generate", 32))
        tasks = [(eta, i, spec, r) for eta in data for i, spec in enumerate(specs)
                 for r in range(cfg.replicates)]
        configs = {eta: build_diffusion(cfg.diffusion, ds) for eta, (ds, _) in data.items()}

    def one(task):
        eta, i, spec, r = task
        ds, man = data[eta]
        dcfg = configs[eta]
        seed = replicate_seed(cfg, r).child("eta", int(round(eta * 1e6)))
        kernel = build_kernel(spec, man)
        model = SmoothedScoreModel(ds, dcfg.schedule, kernel,
                                   int(spec.get("samples", dcfg.smoothing_samples)))
        x = reverse_sde_sample(model, dcfg, n_gen, seed.child("generate"))
        row = {"eta": eta, "kernel_kind": spec["kind"], "sigma": spec.get("sigma"),
               "replicate": r, "kernel": kernel_label(spec), **sample_metrics(x, ds, man)}
        row["anisotropy_mean"] = float(np.mean([anisotropy(v, man.side) for v in x]))
        return row

    with job.stage("sweep"):
        job.columns = ["eta", "kernel_kind", "replicate", "kernel", "lateral_clamped"]
        job.rows = map_ordered(one, tasks, workers)
    with job.stage("summary"):
        summary = {}
        for eta in data:
            rows = [x for x in job.rows if x["eta"] == eta]
            kinds = sorted({x["kernel_kind"] for x in rows})
            entry = {"mean_dist_to_manifold": {
                k: {repr(s): v for s, v in _median_by(
                    [x for x in rows if x["kernel_kind"] == k], "sigma",
                    "dist_to_manifold_mean").items()} for k in kinds}}
            if {"IsotropicGaussian", "ShiftedManifoldAdapted"} <= set(kinds):
                dm, an = [], []
                for r in range(cfg.replicates):
                    iso = [x for x in rows if x["kernel_kind"] == "IsotropicGaussian"
                           and x["replicate"] == r]
                    ad = [x for x in rows if x["kernel_kind"] == "ShiftedManifoldAdapted"
                          and x["replicate"] == r]
                    dm.append(matched_comparison(
                        [(x["dist_to_data_mean"], x["dist_to_manifold_mean"]) for x in iso],
                        [(x["dist_to_data_mean"], x["dist_to_manifold_mean"]) for x in ad]))
                    an.append(matched_comparison(
                        [(x["dist_to_data_mean"], abs(x["anisotropy_mean"] - 1)) for x in iso],
                        [(x["dist_to_data_mean"], abs(x["anisotropy_mean"] - 1)) for x in ad]))
                entry["matched_manifold_gap"] = None if None in dm else float(np.median(dm))
                entry["matched_anisotropy_gap"] = None if None in an else float(np.median(an))
            summary[repr(eta)] = entry
        job.summary = summary
    with job.stage("plots"):
        for eta in data:
            rows = [x for x in job.rows if x["eta"] == eta]
            for metric, fname in (("dist_to_manifold_mean", "manifold"),
                                  ("anisotropy_mean", "anisotropy")):
                series = []
                for kind in sorted({x["kernel_kind"] for x in rows}):
                    sub = [x for x in rows if x["kernel_kind"] == kind]
                    dd = _median_by(sub, "sigma", "dist_to_data_mean")
                    mv = _median_by(sub, "sigma", metric)
                    keys = sorted(dd)
                    series.append({"x": [dd[k] for k in keys], "y": [mv[k] for k in keys],
                                   "label": kind})
                job.files.append(emit_svg_lines(
                    series, job.outdir / f"bump_{fname}_eta{eta:g}.svg",
                    "mean distance to data", metric.replace("_", " ")))


def _affine_verify(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        if not isinstance(man, Affine):
            raise ConfigError("affine_verify needs an affine dataset")
        dcfg = build_diffusion(cfg.diffusion, ds)
        grid = _grid_for(p)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        tol = float(p.get("tolerance", 1e-8))
    with job.stage("residuals"):
        rows = []
        for spec in specs:
            k = build_kernel(spec, man)
            res = affine_residual(ds, man, k, dcfg.epsilon, grid, dcfg.schedule)
            rows.append({"case": "affine", "h": spec.get("h"), "kernel": kernel_label(spec),
                         "residual": res})
        job.rows = rows
        job.columns = ["case", "h", "kernel", "residual"]
        worst = max(r["residual"] for r in rows)
        job.summary = {"max_residual": worst, "tolerance": tol, "passed": bool(worst < tol)}


def _custom(job: _Run, workers):
    cfg = job.config
    p = cfg.params
    with job.stage("setup"):
        ds, man = build_dataset(cfg.dataset)
        dcfg = build_diffusion(cfg.diffusion, ds)
        specs = [s for k in cfg.kernels for s in expand_sweep(k)]
        n_gen = int(p.get("n_generate", 100))
        eval_pts = None
        if p.get("eval_points"):
            eval_pts = load_dataset(p["eval_points"]).points
        (job.outdir / "samples").mkdir(exist_ok=True)

    def one(task):
        i, spec, r = task
        seed = replicate_seed(cfg, r)
        model = SmoothedScoreModel(ds, dcfg.schedule, build_kernel(spec, man),
                                   int(spec.get("samples", dcfg.smoothing_samples)))
        x = reverse_sde_sample(model, dcfg, n_gen, seed.child("generate"))
        row = {"sigma": spec.get("sigma"), "replicate": r, "kernel": kernel_label(spec),
               **sample_metrics(x, ds, man)}
        if eval_pts is not None:
            row["nll"] = float(np.mean(nll_values(model, dcfg, eval_pts, rng=seed.child("nll"))))
        if p.get("save_samples", True):
            save_points(x, job.outdir / "samples" / f"point{i:02d}_rep{r:02d}.csv")
        return row

    with job.stage("sweep"):
        job.columns = ["replicate", "kernel", "lateral_clamped"]
        job.rows = map_ordered(one, _tasks(cfg, specs), workers)
    with job.stage("summary"):
        job.summary = {"points": len(specs), "replicates": cfg.replicates}


SCENARIOS: dict[str, Callable] = {
    "circle_nll_sweep": _circle_nll_sweep,
    "kde_vs_score": _kde_vs_score,
    "manifold_choice": _manifold_choice,
    "bump_manifold": _bump_manifold,
    "affine_verify": _affine_verify,
    "renyi_sweep": _renyi_sweep,
    "custom": _custom,
}
