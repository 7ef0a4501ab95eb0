"""Command-line interface.

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .covariates import CovariateConfig, run_covariate_test
from .dataset import NORMALIZE_MODES, ingest_csv
from .dgp import (
    FllBinaryConfig,
    GaussianContinuousConfig,
    run_monte_carlo,
)
from .diagnostics import moment_curves, slope_bounds, wald_bound_check
from .finite_sample import FiniteConfig, run_finite_sample_test
from .propensity import METHODS, WEIGHT_DISTS, fit_propensity
from .sharp import SharpConfig, run_sharp_test


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    """Deterministic JSON; floats use the shortest round-trip representation."""
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def _csv_list(text):
    return [c.strip() for c in text.split(",") if c.strip()] if text else []


def _pair(text):
    a, b = (float(v) for v in text.split(","))
    return a, b


def _add_data_args(p):
    p.add_argument("--data", required=True, help="case-level CSV file")
    p.add_argument("--col-y", default="y")
    p.add_argument("--col-d", default="d")
    p.add_argument("--col-z", default="z", help="instrument column(s), comma separated")
    p.add_argument("--cols-x", default="", help="covariate columns, comma separated")
    p.add_argument("--drop-missing", action="store_true", help="drop rows with missing values")


def _add_sharp_args(p):
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--boot", type=int, default=800, help="bootstrap replicates B")
    p.add_argument("--qy", type=int, default=None, help="outcome resolution (default 5, or 2 for binary y)")
    p.add_argument("--qp", type=int, default=5, help="propensity resolution")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--eta", type=float, default=1e-6)
    p.add_argument("--pscore", choices=METHODS, default="freq")
    p.add_argument("--weights", choices=WEIGHT_DISTS, default="normal1")
    p.add_argument("--normalize", choices=NORMALIZE_MODES, default="auto")
    p.add_argument("--bounds", type=_pair, default=None, help="a,b for known-bounds normalization")
    p.add_argument("--poly-degree", type=int, default=3)
    p.add_argument("--reestimate-beta", action="store_true",
                   help="re-estimate covariate coefficients in every bootstrap replicate")
    p.add_argument("--condition-on", default="", help="discrete columns defining test cells")
    p.add_argument("--min-cell-n", type=int, default=30)
    p.add_argument("--max-cells", type=int, default=50)


def _add_common(p, seed_required=False):
    p.add_argument("--seed", type=int, required=seed_required, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    p.add_argument("--out", default=None, help="output file (default: standard output)")
    p.add_argument("--emit-config", action="store_true", help="print the resolved configuration and exit")
    p.add_argument("--metadata", action="store_true", help="add run timings under a metadata key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sharpjudge", description="Specification tests for judge-leniency designs.")
    parser.add_argument("--version", action="store_true", help="print version and build information")
    parser.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    test = sub.add_parser("test", help="run a test on data")
    tsub = test.add_subparsers(dest="kind", parser_class=_Parser)
    ts = tsub.add_parser("sharp", help="cube-moment test with bootstrap critical values")
    _add_data_args(ts)
    _add_sharp_args(ts)
    _add_common(ts)
    tf = tsub.add_parser("finite", help="exact finite-sample test for binary outcomes")
    _add_data_args(tf)
    tf.add_argument("--alpha", type=float, default=0.05)
    tf.add_argument("--bsim", type=int, default=1_000_000)
    _add_common(tf)

    sim = sub.add_parser("simulate", help="Monte Carlo rejection rates")
    ssub = sim.add_subparsers(dest="kind", parser_class=_Parser)
    sf = ssub.add_parser("fll", help="binary design with always/never takers")
    sf.add_argument("--J", type=int, default=20)
    sf.add_argument("--n", type=int, default=1000)
    sf.add_argument("--pa", type=float, default=0.2)
    sf.add_argument("--pn", type=float, default=0.2)
    sf.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sg = ssub.add_parser("gaussian", help="Gaussian latent design")
    sg.add_argument("--L", type=int, default=21)
    sg.add_argument("--n", type=int, default=1000)
    sg.add_argument("--delta1", type=float, default=0.0)
    sg.add_argument("--delta2", type=float, default=0.0)
    sg.add_argument("--delta3", type=float, default=0.0)
    sg.add_argument("--beta1", type=float, default=1.0)
    sg.add_argument("--beta0", type=float, default=1.0)
    sg.add_argument("--with-x", action="store_true", help="include the covariate and adjust for it")
    sg.add_argument("--cases-per-judge", type=int, default=None)
    for p in (sf, sg):
        p.add_argument("--reps", type=int, default=100)
        p.add_argument("--test", choices=("sharp", "finite"), default="sharp")
        p.add_argument("--binarize", type=float, default=None, help="replace y by 1{y >= value}")
        p.add_argument("--bsim", type=int, default=1_000_000)
        _add_sharp_args(p)
        _add_common(p, seed_required=True)

    diag = sub.add_parser("diagnose", help="descriptive diagnostics")
    dsub = diag.add_subparsers(dest="kind", parser_class=_Parser)
    dc = dsub.add_parser("curves", help="conditional moment curves as CSV")
    ds_ = dsub.add_parser("slopes", help="pairwise slope bounds as CSV")
    dw = dsub.add_parser("wald", help="Wald estimand against the outcome range")
    for p in (dc, ds_, dw):
        _add_data_args(p)
        p.add_argument("--pscore", choices=METHODS, default="freq")
        p.add_argument("--out", default=None)
        p.add_argument("--emit-config", action="store_true")
    for p in (dc, ds_):
        p.add_argument("--g", default="identity", help="identity or interval:a,b")
        p.add_argument("--bins", type=int, default=None)
    dc.add_argument("--normalize", choices=NORMALIZE_MODES, default=None)
    ds_.add_argument("--K", type=float, required=True)
    ds_.add_argument("--variant", choices=("Y", "YD", "Y1mD"), default="Y")
    ds_.add_argument("--Lg", type=float, default=0.0)
    dw.add_argument("--U", type=float, required=True)
    dw.add_argument("--L", type=float, required=True)
    return parser


def _threads(args):
    return args.threads if args.threads is not None else (os.cpu_count() or 1)


def _sharp_config(args, seed):
    return SharpConfig(
        alpha=args.alpha, B=args.boot, Q_Y=args.qy, Q_P=args.qp, eps=args.eps, eta=args.eta,
        pscore=args.pscore, weights=args.weights, seed=seed, threads=_threads(args),
        normalize=args.normalize, bounds=args.bounds,
    )


def _covariate_config(args, sharp):
    return CovariateConfig(
        sharp=sharp, poly_degree=args.poly_degree, reestimate_beta=args.reestimate_beta,
        condition_on=tuple(_csv_list(args.condition_on)), min_cell_n=args.min_cell_n,
        max_cells=args.max_cells,
    )


def _load(args):
    return ingest_csv(
        args.data, args.col_y, args.col_d, _csv_list(args.col_z), _csv_list(args.cols_x),
        drop_missing=args.drop_missing,
    )


def _config_echo(cfg):
    d = asdict(cfg)
    return {"kind": type(cfg).__name__, **d}


def _write(text, path):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _run(args) -> int:
    t0 = time.perf_counter()
    if args.command == "test" and args.kind == "sharp":
        from . import _rng
        seed = _rng.fresh_seed() if args.seed is None else args.seed
        sharp = _sharp_config(args, seed)
        use_cov = bool(_csv_list(args.cols_x) or _csv_list(args.condition_on))
        cfg = _covariate_config(args, sharp) if use_cov else sharp
        if args.emit_config:
            _write(dumps(_config_echo(cfg)), args.out)
            return 0
        ds = _load(args)
        res = run_covariate_test(ds, cfg) if use_cov else run_sharp_test(ds, cfg)
        out = res.to_dict()
    elif args.command == "test" and args.kind == "finite":
        cfg = FiniteConfig(alpha=args.alpha, B_sim=args.bsim,
                           seed=0 if args.seed is None else args.seed, threads=_threads(args))
        if args.emit_config:
            _write(dumps(_config_echo(cfg)), args.out)
            return 0
        out = run_finite_sample_test(_load(args), cfg).to_dict()
        out["config"] = {"alpha": cfg.alpha, "B_sim": cfg.B_sim, "seed": cfg.seed}
    elif args.command == "simulate":
        if args.kind == "fll":
            dgp = FllBinaryConfig(J=args.J, n=args.n, p_a=args.pa, p_n=args.pn, lam=args.lam)
        else:
            dgp = GaussianContinuousConfig(
                L=args.L, n=args.n, delta1=args.delta1, delta2=args.delta2, delta3=args.delta3,
                beta1=args.beta1, beta0=args.beta0, with_x=args.with_x,
                cases_per_judge=args.cases_per_judge,
            )
        if args.test == "finite":
            test = FiniteConfig(alpha=args.alpha, B_sim=args.bsim, seed=args.seed)
        else:
            sharp = _sharp_config(args, None)
            with_x = getattr(args, "with_x", False)
            test = _covariate_config(args, sharp) if with_x or args.condition_on else sharp
        if args.emit_config:
            _write(dumps({"dgp": _config_echo(dgp), "test": _config_echo(test),
                          "reps": args.reps, "seed": args.seed}), args.out)
            return 0
        rep = run_monte_carlo(dgp, test, args.reps, args.seed, threads=_threads(args),
                              binarize=args.binarize)
        out = rep.to_dict()
        meta = out.pop("metadata")
        if args.metadata:
            out["metadata"] = meta
    elif args.command == "diagnose":
        if args.emit_config:
            _write(dumps(vars(args)), args.out)
            return 0
        ds = _load(args)
        fit = fit_propensity(ds, args.pscore)
        if args.kind == "curves":
            _write(moment_curves(ds, fit, args.g, args.bins, args.normalize).to_csv(), args.out)
        elif args.kind == "slopes":
            rows = slope_bounds(ds, fit, args.K, args.variant, args.g, args.Lg, args.bins)
            lines = ["p,p_prime,slope,lower,upper,violated"]
            lines += [
                f"{r.p!r},{r.p_prime!r},{r.slope!r},{r.lower!r},{r.upper!r},{int(r.violated)}"
                for r in rows
            ]
            _write("\n".join(lines) + "\n", args.out)
        else:
            _write(dumps(asdict(wald_bound_check(ds, fit, args.U, args.L))), args.out)
        return 0
    else:
        raise UsageError("missing subcommand", build_parser().format_usage())

    if getattr(args, "metadata", False) and args.command == "test":
        out["metadata"] = {"seconds": time.perf_counter() - t0, "threads": _threads(args)}
    _write(dumps(out), args.out)
    return 0


def _version_text():
    import scipy
    return (f"sharpjudge {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__}, scipy {scipy.__version__})\n")


def _report(args_json, code, kind, message, usage=""):
    if args_json:
        sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    else:
        if usage:
            sys.stderr.write(usage)
        sys.stderr.write(f"sharpjudge: error: {message}\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    json_errors = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            sys.stdout.write(_version_text())
            return 0
        if args.command is None or getattr(args, "kind", None) is None:
            raise UsageError("a subcommand is required", parser.format_usage())
        return _run(args)
    except UsageError as exc:
        return _report(json_errors, 2, "usage", str(exc), exc.usage)
    except (ValueError, RuntimeError, OSError, ArithmeticError, KeyError) as exc:
        return _report(json_errors, 1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
