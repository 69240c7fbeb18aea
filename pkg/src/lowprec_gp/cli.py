"""Command-line front door: experiment orchestration and JSON result emission.

One experiment per invocation.  Every subcommand emits a single JSON
document (stdout, and to --out when given); spectra and residual histories
go to sibling CSV files next to --out.  Exit codes: 0 success, 2 bad
configuration, 3 numerical breakdown.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import backend
from .cg import solve_kernel_system
from .data import Dataset, EmptyDataset, ParseError, load_csv, synthetic_gp
from .formats import get_format
from .kernels import (KernelSpec, UnsupportedFamily, kernel_rows,
                      max_representable_distance, support_mask)
from .mvm import (BLOCK_SAME, BLOCK_WIDER, KAHAN, KernelOperator, MvmPolicy,
                  OverflowDetected, cross_mvm, truncated_predict_dot)
from .mvm import _policy_row_dot
from .spectrum import (DomainError, effective_dimension, quantized_ed_bound,
                       quantized_spectrum)
from .training import NonFinite, TrainConfig, predict, train

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class BreakdownError(RuntimeError):
    pass


def _policy_from(args) -> MvmPolicy:
    fmt = get_format(args.format)
    acc = {"same": (BLOCK_SAME, None),
           "wider-fp32": (BLOCK_WIDER, "fp32"),
           "wider-fp64": (BLOCK_WIDER, "fp64"),
           "kahan": (KAHAN, None)}[args.accumulation]
    if args.downscale == "auto":
        downscale = fmt.name in ("fp16", "bf16")
    else:
        downscale = args.downscale == "on"
    return MvmPolicy(block_size=args.block_size, compute_format=fmt,
                     accumulation=acc[0], wide_format=acc[1],
                     downscale=downscale)


def _spec_from(args, family: str, noise_sq=None) -> KernelSpec:
    return KernelSpec(
        family=family,
        lengthscales=args.lengthscale,
        outputscale_sq=args.outputscale_sq,
        noise_sq=args.noise_sq if noise_sq is None else noise_sq,
    )


def _dataset_from(args) -> tuple[Dataset, str]:
    if args.data is not None:
        if args.target is None:
            raise ConfigError("--data requires --target")
        ds = load_csv(args.data, args.target, args.split_fraction, args.seed)
        family = args.kernel
        return ds, family
    if args.synthetic is not None:
        n, d, family = args.synthetic
        try:
            n, d = int(n), int(d)
        except ValueError:
            raise ConfigError("--synthetic expects N D FAMILY") from None
        ds = synthetic_gp(n, d, family, lengthscale=args.lengthscale,
                          outputscale_sq=args.outputscale_sq,
                          noise_sq=args.noise_sq, seed=args.seed)
        return ds, (args.kernel or family)
    raise ConfigError("need --data PATH --target COL or --synthetic N D FAMILY")


def _run_solve(args) -> dict:
    ds, family = _dataset_from(args)
    spec = _spec_from(args, family)
    policy = _policy_from(args)
    report = solve_kernel_system(
        spec, ds.X, ds.y, policy=policy, rank=args.precond_rank,
        tolerance=args.tol, max_iters=args.max_iters,
        stabilized=args.stabilized,
    )
    bnorm = float(np.linalg.norm(ds.y))
    metrics = {
        "iterations": int(report.iterations),
        "status": report.status,
        "final_residual": float(report.residual_history[-1]),
        "min_residual": float(min(report.residual_history)),
        "relative_residual": float(report.residual_history[-1]) / bnorm,
        "rhs_norm": bnorm,
    }
    artifacts = {"residual_history": [float(v) for v in report.residual_history]}
    return {"metrics": metrics, "artifacts": artifacts,
            "csv": {"residuals": [("iteration", "residual_norm"),
                                  *enumerate(map(float, report.residual_history))]}}


def _run_train(args) -> dict:
    ds, family = _dataset_from(args)
    policy = _policy_from(args)
    cfg = TrainConfig(
        family=family, steps=args.steps, lr=args.lr, probes=args.probes,
        precond_rank=args.precond_rank, tolerance=args.tol,
        max_iters=args.max_iters, policy=policy, seed=args.seed,
        ard=args.ard, init_lengthscale=args.lengthscale,
        init_outputscale_sq=args.outputscale_sq,
        init_noise_sq=args.init_noise_sq,
    )
    model, trace = train(ds.X, ds.y, cfg)
    out = predict(model, ds.X, ds.y, ds.X_test, precond_rank=args.precond_rank)
    err = out["mean"] - ds.y_test
    rmse = float(np.sqrt(np.mean(err ** 2)))
    var = np.maximum(out["variance"], 1e-12)
    nll = float(np.mean(0.5 * (np.log(2 * np.pi * var) + err ** 2 / var)))
    metrics = {
        "noise_sq": model.noise_sq,
        "outputscale_sq": model.outputscale_sq,
        "mean_lengthscale": float(np.mean(model.lengthscales)),
        "steps_completed": len(trace),
        "test_rmse": rmse,
        "test_nll": nll,
        "cg_iterations_total": int(sum(trace.cg_iterations)),
    }
    tr = trace.to_dict()
    rows = [tuple(tr.keys())]
    rows += list(zip(*[tr[k] for k in tr]))
    return {"metrics": metrics,
            "artifacts": {"model": json.loads(model.to_json(ds.standardization()))},
            "csv": {"trace": rows}}


def _run_spectrum(args) -> dict:
    ds, family = _dataset_from(args)
    spec = _spec_from(args, family)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    metrics = {"formats": {}}
    csvs = {}
    s = args.ed_s if args.ed_s is not None else spec.noise_sq
    for name in formats:
        rep = quantized_spectrum(spec, ds.X, name)
        ed = effective_dimension(rep.eigenvalues, s)
        metrics["formats"][name] = {
            "lambda_max": float(rep.eigenvalues[0]),
            "n_eff": ed,
            "s": s,
        }
        csvs[f"spectrum_{name}"] = [("index", "eigenvalue"),
                                    *enumerate(map(float, rep.eigenvalues))]
    return {"metrics": metrics, "csv": csvs}


def _run_maxdist(args) -> dict:
    radius = max_representable_distance(
        args.family, args.lengthscale, args.format,
        use_subnormal=args.use_subnormal,
        alpha=args.alpha, period=args.period,
        per_lengthscale=args.per_lengthscale,
    )
    return {"metrics": {
        "family": radius.family,
        "lengthscale": radius.lengthscale,
        "format": radius.format.name,
        "d_max": radius.d_max,
        "epsilon": (radius.format.min_positive_subnormal if args.use_subnormal
                    else radius.format.min_positive_normal),
    }}


def _run_mvm_bench(args) -> dict:
    ds, family = _dataset_from(args)
    spec = _spec_from(args, family)
    rng = np.random.default_rng(args.seed)
    v = rng.standard_normal(ds.n)
    fmt = get_format(args.format)

    # single-precision dense reference (BLAS float32 product)
    from .kernels import assemble_kernel_matrix

    K32 = assemble_kernel_matrix(spec, ds.X, "fp32", with_noise=True)
    ref = (K32.astype(np.float32) @ v.astype(np.float32)).astype(np.float64)

    policies = {
        "block_same": MvmPolicy(args.block_size, fmt, BLOCK_SAME,
                                downscale=False),
        "block_wider_fp32": MvmPolicy(args.block_size, fmt, BLOCK_WIDER,
                                      "fp32", downscale=False),
        "kahan": MvmPolicy(args.block_size, fmt, KAHAN, downscale=False),
    }
    backends = ["compiled", "python"] if backend.HAVE_COMPILED else ["python"]
    prev = backend.backend_name()
    metrics = {"policies": {}, "reference": "fp32 dense BLAS"}
    try:
        for pname, pol in policies.items():
            entry = {}
            for bname in backends:
                backend.set_backend(bname)
                op = KernelOperator(spec, ds.X, pol)
                t0 = time.perf_counter()
                out = op.apply(v)
                dt = time.perf_counter() - t0
                denom = np.maximum(np.abs(ref), 1e-12)
                entry[bname] = {
                    "seconds": dt,
                    "mean_rel_error": float(np.mean(np.abs(out - ref) / denom)),
                }
            metrics["policies"][pname] = entry
    finally:
        backend.set_backend(prev)
    return {"metrics": metrics}


def _run_truncation(args) -> dict:
    fmt = get_format(args.format)
    family = args.kernel or "matern12"
    spec = _spec_from(args, family)
    n = args.grid_n
    X = np.linspace(-args.span / 2, args.span / 2, n)[:, None]
    rng = np.random.default_rng(args.seed)
    # predictive-mean cache computed upstream in double precision
    from .formats import quantize
    from .kernels import assemble_kernel_matrix

    K = assemble_kernel_matrix(spec, X, "fp64", with_noise=True)
    y = rng.standard_normal(n)
    v = np.linalg.solve(K, y)
    policy = MvmPolicy(block_size=args.block_size, compute_format=fmt)
    max_err = 0.0
    fracs = []
    for i in range(0, n, max(1, n // args.test_points)):
        x_star = X[i]
        mask = support_mask(spec, x_star, X, fmt)
        fracs.append(len(mask) / n)
        mu_t = truncated_predict_dot(spec, x_star, X, v, fmt, policy)
        entries = kernel_rows(spec, x_star[None, :], X, fmt)[0]
        vq = np.asarray(quantize(v, fmt))
        mu_f = _policy_row_dot(entries, vq, np.ones(n, dtype=bool), fmt,
                               policy)
        max_err = max(max_err, abs(mu_t - mu_f))
    return {"metrics": {
        "max_abs_truncation_error": max_err,
        "mean_support_fraction": float(np.mean(fracs)),
        "min_support_fraction": float(np.min(fracs)),
        "grid_n": n,
        "span": args.span,
    }}


def _run_ed_bound(args) -> dict:
    ds, family = _dataset_from(args)
    spec = _spec_from(args, family)
    rep = quantized_spectrum(spec, ds.X, args.format)
    lam = np.maximum(rep.eigenvalues, 0.0)
    s = args.ed_s if args.ed_s is not None else spec.noise_sq
    delta = args.ed_delta
    ned = effective_dimension(lam, s)
    bound = quantized_ed_bound(lam, s, delta, seed=args.seed)
    return {"metrics": {
        "n_eff": ned,
        "s": s,
        "delta": delta,
        **bound,
        "bound_holds": bool(bound["mc_estimate"] >= ned - 3 * bound["mc_stderr"]),
    }}


_RUNNERS = {
    "solve": _run_solve,
    "train": _run_train,
    "spectrum": _run_spectrum,
    "maxdist": _run_maxdist,
    "mvm-bench": _run_mvm_bench,
    "truncation": _run_truncation,
    "ed-bound": _run_ed_bound,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lowprec-gp",
        description="Mixed-precision Gaussian process experiments",
    )
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in _RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--data", type=str, default=None)
        sp.add_argument("--target", type=str, default=None)
        sp.add_argument("--synthetic", nargs=3, metavar=("N", "D", "FAMILY"),
                        default=None)
        sp.add_argument("--split-fraction", type=float, default=0.1)
        sp.add_argument("--format", type=str, default="fp32",
                        choices=["fp16", "fp32", "fp64", "bf16"])
        sp.add_argument("--formats", type=str, default="fp16,fp32,fp64")
        sp.add_argument("--kernel", type=str, default=None)
        sp.add_argument("--family", type=str, default="matern12")
        sp.add_argument("--lengthscale", type=float, default=1.0)
        sp.add_argument("--outputscale-sq", type=float, default=1.0)
        sp.add_argument("--noise-sq", type=float, default=0.1)
        sp.add_argument("--alpha", type=float, default=2.0)
        sp.add_argument("--period", type=float, default=1.0)
        sp.add_argument("--per-lengthscale", type=float, default=1.0)
        sp.add_argument("--precond-rank", type=int, default=5)
        sp.add_argument("--tol", type=float, default=1.0)
        sp.add_argument("--max-iters", type=int, default=50)
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--lr", type=float, default=0.1)
        sp.add_argument("--probes", type=int, default=8)
        sp.add_argument("--init-noise-sq", type=float, default=2.0)
        sp.add_argument("--ard", action="store_true")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--block-size", type=int, default=64)
        sp.add_argument("--accumulation", type=str, default="wider-fp32",
                        choices=["same", "wider-fp32", "wider-fp64", "kahan"])
        sp.add_argument("--downscale", type=str, default="auto",
                        choices=["auto", "on", "off"])
        sp.add_argument("--stabilized", dest="stabilized",
                        action="store_true", default=True)
        sp.add_argument("--standard", dest="stabilized", action="store_false")
        sp.add_argument("--use-subnormal", action="store_true")
        sp.add_argument("--ed-s", type=float, default=None)
        sp.add_argument("--ed-delta", type=float, default=1e-3)
        sp.add_argument("--span", type=float, default=40.0)
        sp.add_argument("--grid-n", type=int, default=1000)
        sp.add_argument("--test-points", type=int, default=25)
    return p


def _config_echo(args) -> dict:
    skip = {"out"}
    return {k: v for k, v in sorted(vars(args).items())
            if k not in skip and not k.startswith("_")}


def run_experiment(argv) -> tuple[int, dict]:
    """Parse argv, run one experiment, return (exit_code, result document)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": args.subcommand,
        "seed": args.seed,
        "backend": backend.backend_name(),
        "config": _config_echo(args),
    }
    t0 = time.perf_counter()
    try:
        result = _RUNNERS[args.subcommand](args)
    except (ConfigError, ParseError, EmptyDataset, UnsupportedFamily,
            DomainError, ValueError) as exc:
        doc["error"] = {"type": type(exc).__name__, "message": str(exc)}
        return 2, doc
    except (OverflowDetected, NonFinite) as exc:
        doc["error"] = {"type": type(exc).__name__, "message": str(exc)}
        return 3, doc
    doc["wall_time_s"] = time.perf_counter() - t0
    doc["metrics"] = result["metrics"]
    if "artifacts" in result:
        doc["artifacts"] = result["artifacts"]
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        csv_files = {}
        for name, rows in result.get("csv", {}).items():
            csv_path = out_path.with_name(f"{out_path.stem}_{name}.csv")
            with open(csv_path, "w") as f:
                for row in rows:
                    f.write(",".join(str(c) for c in row) + "\n")
            csv_files[name] = csv_path.name
        if csv_files:
            doc["csv_files"] = csv_files
        out_path.write_text(json.dumps(doc, indent=2) + "\n")
    return 0, doc


def main(argv=None) -> int:
    code, doc = run_experiment(sys.argv[1:] if argv is None else argv)
    print(json.dumps(doc, indent=2))
    return code


if __name__ == "__main__":
    sys.exit(main())
