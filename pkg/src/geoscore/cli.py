"""Command-line interface.

Each subcommand reads an optional JSON config file and then applies any
flags given explicitly, so flags always win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .analysis import Grid, RenyiOrder, affine_residual, eval_grid, nll_values, renyi_details
from .core import save_points
from .errors import (CapabilityError, ConfigError, DomainError, GeoscoreError, NumericalError,
                     ParseError)
from .experiments import (EXPERIMENTS, ExperimentConfig, StageError, build_dataset,
                          build_diffusion, build_kernel, default_config, run)
from .kernels import IsotropicGaussian, LevelSetAdapted, estimate_K
from .manifolds import Affine, manifold_from_dict
from .rng import RngSeed
from .sampler import kde_sample, reverse_sde_sample
from .smoothing import SmoothedScoreModel

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

KERNEL_KINDS = ("none", "IsotropicGaussian", "FixedStencil", "AnisotropicGaussian",
                "LevelSetAdapted", "ShiftedManifoldAdapted")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (ParseError, OSError)):
        return EXIT_IO
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ConfigError, DomainError, CapabilityError, GeoscoreError, ValueError,
                        KeyError, TypeError)):
        return EXIT_CONFIG
    raise exc


# ---------------------------------------------------------------------------
# Flag groups
# ---------------------------------------------------------------------------


def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from None


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (default: GEOSCORE_THREADS or 1)")


def _add_dataset(p: argparse.ArgumentParser):
    g = p.add_argument_group("dataset")
    g.add_argument("--data", type=Path, help="training points (CSV rows or f64 binary)")
    g.add_argument("--header", action="store_true", default=None, help="CSV has a header row")
    g.add_argument("--dataset", choices=("circle", "wavy_circle", "bump", "line"),
                   help="built-in dataset")
    g.add_argument("--n-points", type=int, help="size of the built-in dataset")
    g.add_argument("--eta", type=float, help="bump curve parameter")
    g.add_argument("--manifold", type=_json_arg,
                   help='manifold as JSON, e.g. {"kind": "Circle", "radius": 1}')


def _add_kernel(p: argparse.ArgumentParser):
    g = p.add_argument_group("kernel")
    g.add_argument("--kernel", choices=KERNEL_KINDS)
    g.add_argument("--sigma", type=float, help="smoothing scale")
    g.add_argument("--h", type=float, help="stencil half-width")
    g.add_argument("--sigma-tangent", type=float)
    g.add_argument("--sigma-normal", type=float)
    g.add_argument("--smoothing-samples", type=int)


def _add_diffusion(p: argparse.ArgumentParser):
    g = p.add_argument_group("diffusion")
    g.add_argument("--schedule", choices=("auto", "ou", "ve_geometric"))
    g.add_argument("--alpha", type=float)
    g.add_argument("--T", type=float)
    g.add_argument("--sigma-min", type=float)
    g.add_argument("--sigma-max", type=float)
    g.add_argument("--n-steps", type=int)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--corrector-steps", type=int)
    g.add_argument("--corrector-snr", type=float)
    g.add_argument("--time-grid", choices=("uniform", "log"))


def _load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _set(target: dict, key: str, value):
    if value is not None:
        target[key] = value


def _dataset_spec(args, cfg: dict) -> dict:
    spec = dict(cfg.get("dataset", {}))
    if args.data is not None:
        spec = {"kind": "file", "path": str(args.data)}
    elif args.dataset is not None:
        spec = {"kind": args.dataset}
    _set(spec, "n", args.n_points)
    _set(spec, "eta", args.eta)
    _set(spec, "header", args.header)
    if args.manifold is not None:
        spec["manifold"] = args.manifold
    if not spec:
        raise ConfigError("no dataset: pass --data, --dataset or a config file")
    return spec


def _dataset(args, cfg: dict):
    spec = _dataset_spec(args, cfg)
    ds, man = build_dataset(spec)
    if args.manifold is not None:
        man = manifold_from_dict(args.manifold)
    return ds, man


def _kernel_spec(args, cfg: dict) -> dict:
    spec = dict(cfg.get("kernel", {}))
    if args.kernel is not None and args.kernel != spec.get("kind"):
        spec = {"kind": args.kernel}
    _set(spec, "sigma", args.sigma)
    _set(spec, "h", args.h)
    _set(spec, "sigma_tangent", args.sigma_tangent)
    _set(spec, "sigma_normal", args.sigma_normal)
    spec.setdefault("kind", "IsotropicGaussian" if "sigma" in spec else "none")
    kind = spec["kind"]
    if kind in ("ShiftedManifoldAdapted", "LevelSetAdapted"):
        spec.setdefault("manifold", "data")
    if kind == "AnisotropicGaussian":
        spec.setdefault("frame_source", "data")
    if kind == "LevelSetAdapted" and "base" not in spec:
        if "sigma" not in spec:
            raise ConfigError("LevelSetAdapted needs --sigma for its isotropic base")
        spec["base"] = {"kind": "IsotropicGaussian", "sigma": spec.pop("sigma")}
    return spec


def _diffusion_spec(args, cfg: dict) -> dict:
    spec = dict(cfg.get("diffusion", {}))
    if args.schedule == "auto":
        spec["schedule"] = "auto"
    elif args.schedule is not None:
        spec["schedule"] = {"kind": args.schedule}
    sched = spec.get("schedule", "auto")
    if isinstance(sched, dict):
        sched = dict(sched)
        if sched.get("kind") == "ou":
            _set(sched, "alpha", args.alpha)
        else:
            _set(sched, "sigma_min", args.sigma_min)
            _set(sched, "sigma_max", args.sigma_max)
        _set(sched, "T", args.T)
        spec["schedule"] = sched
    else:
        _set(spec, "sigma_min", args.sigma_min)
        _set(spec, "T", args.T)
    for flag, key in (("n_steps", "n_steps"), ("epsilon", "epsilon"),
                      ("corrector_steps", "corrector_steps"), ("corrector_snr", "corrector_snr"),
                      ("time_grid", "time_grid"), ("smoothing_samples", "smoothing_samples")):
        _set(spec, key, getattr(args, flag, None))
    return spec


def _model(args, cfg):
    ds, man = _dataset(args, cfg)
    dcfg = build_diffusion(_diffusion_spec(args, cfg), ds)
    kernel = build_kernel(_kernel_spec(args, cfg), man)
    model = SmoothedScoreModel(ds, dcfg.schedule, kernel, dcfg.smoothing_samples)
    return ds, man, dcfg, model


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _emit(points: np.ndarray, out: Optional[Path]):
    if out is None:
        for row in points:
            print(",".join(repr(float(v)) for v in row))
    else:
        save_points(points, out)
        print(f"wrote {len(points)} points to {out}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    _, _, dcfg, model = _model(args, cfg)
    n = int(args.n if args.n is not None else cfg.get("n", 100))
    x = reverse_sde_sample(model, dcfg, n, RngSeed(_seed(args, cfg)), workers=args.threads)
    _emit(x, args.out)
    return EXIT_OK


def cmd_kde(args) -> int:
    cfg = _load_config(args.config)
    ds, _ = _dataset(args, cfg)
    sigma = args.sigma if args.sigma is not None else cfg.get("sigma")
    if sigma is None:
        raise ConfigError("kde needs --sigma")
    n = int(args.n if args.n is not None else cfg.get("n", 100))
    _emit(kde_sample(ds, float(sigma), n, RngSeed(_seed(args, cfg))), args.out)
    return EXIT_OK


def cmd_nll(args) -> int:
    from .core import load_dataset

    cfg = _load_config(args.config)
    ds, _, dcfg, model = _model(args, cfg)
    pts = load_dataset(args.eval).points if args.eval is not None else ds.points
    vals = nll_values(model, dcfg, pts, rng=RngSeed(_seed(args, cfg)).child("nll"))
    if args.out is not None:
        save_points(vals[:, None], args.out)
    print(json.dumps({"mean_nll": float(np.mean(vals)), "n_points": int(len(vals))}))
    return EXIT_OK


def cmd_renyi(args) -> int:
    cfg = _load_config(args.config)
    ds, man = _dataset(args, cfg)
    if man is None:
        raise ConfigError("renyi needs a manifold (--manifold or a built-in dataset)")
    if ds.dim != 2:
        raise ConfigError("grid divergences are implemented for planar data")
    dcfg = build_diffusion(_diffusion_spec(args, cfg), ds)
    sigma = args.sigma if args.sigma is not None else cfg.get("sigma")
    if sigma is None:
        raise ConfigError("renyi needs --sigma")
    n = dcfg.smoothing_samples
    base = IsotropicGaussian(float(sigma))
    mu_eps, _ = dcfg.schedule.mu_sigma(dcfg.epsilon)
    iso = SmoothedScoreModel(ds, dcfg.schedule, base, n)
    adapted = SmoothedScoreModel(ds, dcfg.schedule, LevelSetAdapted(base, man, mu_eps), n)
    grid = Grid.square(-args.bound, args.bound, args.resolution)
    noise = iso.draw_noise(RngSeed(_seed(args, cfg)).child("noise").generator())
    p = eval_grid(adapted, dcfg.epsilon, grid, noise=noise)
    q = eval_grid(iso, dcfg.epsilon, grid, noise=noise)
    res = renyi_details(p, q, RenyiOrder(args.order))
    print(json.dumps({"order": args.order, "sigma": float(sigma), "divergence": res.value,
                      "floored_cells": res.floored_cells}))
    return EXIT_OK


def cmd_verify_affine(args) -> int:
    cfg = _load_config(args.config)
    if args.data is None and args.dataset is None and "dataset" not in cfg:
        cfg["dataset"] = {"kind": "line", "n": 5, "patch": [-1.5, 1.5], "offset": 0.3}
    ds, man = _dataset(args, cfg)
    if not isinstance(man, Affine):
        raise ConfigError("verify-affine needs an affine manifold")
    dspec = _diffusion_spec(args, cfg)
    dspec.setdefault("epsilon", 0.01)
    dcfg = build_diffusion(dspec, ds)
    h = float(args.h if args.h is not None else cfg.get("kernel", {}).get("h", 0.1))
    kernel = build_kernel({"kind": "FixedStencil", "h": h}, man)
    grid = Grid.square(-args.bound, args.bound, args.resolution, ds.dim)
    res = affine_residual(ds, man, kernel, dcfg.epsilon, grid, dcfg.schedule)
    ok = res < args.tolerance
    print(json.dumps({"residual": res, "tolerance": args.tolerance, "passed": bool(ok)}))
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_estimate_k(args) -> int:
    from .core import load_dataset

    cfg = _load_config(args.config)
    ds, man = _dataset(args, cfg)
    if man is None:
        raise ConfigError("estimate-k needs a manifold")
    kernel = build_kernel(_kernel_spec(args, cfg), man)
    if kernel is None:
        raise ConfigError("estimate-k needs a kernel")
    probes = load_dataset(args.probes).points if args.probes is not None else ds.points
    diag = estimate_K(kernel, man, probes, args.samples_per_probe,
                      RngSeed(_seed(args, cfg)).child("estimate_k").generator())
    print(json.dumps({"K": diag.K, "K_max": diag.K_max, "probe_count": diag.probe_count}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config)
    if cfg and "name" in cfg and cfg["name"] != args.name:
        raise ConfigError(f"config is for {cfg['name']!r}, not {args.name!r}")
    base = default_config(args.name, full=args.full).to_dict()
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    _set(base, "seed", args.seed)
    _set(base, "replicates", args.replicates)
    _set(base, "outdir", None if args.outdir is None else str(args.outdir))
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        base.setdefault("params", {})[key] = value
    config = ExperimentConfig.from_dict(base)
    report = run(config, workers=args.threads)
    print(json.dumps({"outdir": str(report.outdir), "rows": len(report.rows),
                      "summary": report.summary}, default=str))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geoscore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="reverse-SDE samples from the smoothed score")
    _add_common(p), _add_dataset(p), _add_kernel(p), _add_diffusion(p)
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("kde", help="samples from the Gaussian KDE of the data")
    _add_common(p), _add_dataset(p)
    p.add_argument("--sigma", type=float, help="bandwidth")
    p.add_argument("--n", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_kde)

    p = sub.add_parser("nll", help="PF-ODE negative log-likelihood")
    _add_common(p), _add_dataset(p), _add_kernel(p), _add_diffusion(p)
    p.add_argument("--eval", type=Path, help="evaluation points (default: training data)")
    p.add_argument("--out", type=Path, help="write per-point NLL")
    p.set_defaults(func=cmd_nll)

    p = sub.add_parser("renyi", help="grid Renyi divergence of adapted vs isotropic smoothing")
    _add_common(p), _add_dataset(p), _add_diffusion(p)
    p.add_argument("--sigma", type=float)
    p.add_argument("--smoothing-samples", type=int)
    p.add_argument("--order", type=float, default=2.0)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--bound", type=float, default=1.5)
    p.set_defaults(func=cmd_renyi)

    p = sub.add_parser("verify-affine", help="check stencil vs tangent-stencil equivalence")
    _add_common(p), _add_dataset(p), _add_diffusion(p)
    p.add_argument("--h", type=float)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--bound", type=float, default=2.0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.set_defaults(func=cmd_verify_affine)

    p = sub.add_parser("estimate-k", help="measured normal spread of a kernel")
    _add_common(p), _add_dataset(p), _add_kernel(p)
    p.add_argument("--probes", type=Path, help="probe points (default: training data)")
    p.add_argument("--samples-per-probe", type=int, default=1000)
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("experiment", help="run a named scenario")
    p.add_argument("name", choices=EXPERIMENTS)
    _add_common(p)
    p.add_argument("--full", action="store_true", help="full-scale sample counts")
    p.add_argument("--replicates", type=int)
    p.add_argument("--outdir", type=Path)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a scenario parameter (JSON values allowed)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except Exception as exc:
        code = exit_code(exc)
        print(f"geoscore: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
