"""Command line front end: ``confbal {weights,ate,simulate,diagnose}``.

Every run writes its outputs plus ``metadata.json`` into ``--out-dir``.
``confbal --config DIR/metadata.json [flags]`` replays a recorded run, with
any extra flags overriding the recorded ones. Failures are reported as one
JSON object per line on stderr; exit code 0 is success, 1 a runtime or
numerical failure, 2 a usage or schema error.
"""

import argparse
import json
import os
import secrets
import sys
import time
import warnings
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from .data import load_csv
from .diagnostics import (SMD_CONVENTION, association_stats, balance_report,
                          bootstrap_se)
from .errors import ConfbalError, UsageError
from .estimators import (ALL_METHODS, EstimateConfig, Method, append_result_row,
                         estimate_ate)
from .forest import ForestParams, default_threads, save_forest
from .kernel import write_gram_csv
from .simulation import DgpSpec, Model, SimulationReport, run_experiment
from .weights import read_weights_csv, write_trace_csv, write_weights_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_model_flags(p):
    p.add_argument("--method", action="append", metavar="NAME",
                   help="rf-kernel-mmd, gaussian-mmd, logistic-ipw, rf-ipw or 'all'; "
                        "repeatable (default rf-kernel-mmd)")
    p.add_argument("--trees", type=_positive_int, help="trees per forest (default 1000)")
    p.add_argument("--mtry", type=_positive_int, help="candidate features per split of the kernel forest")
    p.add_argument("--min-node", type=_positive_int, help="minimum leaf size of the kernel forest")
    p.add_argument("--lambda", dest="lam", type=float, help="ridge penalty (default 0.01/n)")
    p.add_argument("--no-nonneg", action="store_true", help="drop the w >= 0 constraint")
    p.add_argument("--fit-fraction", type=float, default=0.5,
                   help="share of rows used to grow the kernel forest")
    p.add_argument("--seed", type=int, help="master seed (random if omitted; always recorded)")
    p.add_argument("--threads", type=_positive_int,
                   help="worker threads (falls back to CONFBAL_THREADS, then 1)")
    p.add_argument("--out-dir", default="confbal-out", help="output directory")


def _add_data_flags(p, required=True):
    p.add_argument("--input", required=required, help="CSV file with a header row")
    p.add_argument("--outcome", default="y", help="outcome column (default y)")
    p.add_argument("--treatment", default="a", help="0/1 treatment column (default a)")
    p.add_argument("--covariates", default="rest",
                   help="comma separated covariate columns, or 'rest' (default)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confbal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("weights", help="fit balancing or propensity weights and write them")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--export-gram", action="store_true", help="also write the Gram matrix as CSV")

    p = sub.add_parser("ate", help="estimate the average treatment effect")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="bootstrap resamples for a standard error (0 = none)")

    p = sub.add_parser("simulate", help="replicated simulation over a grid of (n, p)")
    _add_model_flags(p)
    p.add_argument("--model", required=True, type=str.lower, choices=[m.value for m in Model])
    p.add_argument("--n", type=_positive_int, nargs="+", default=[500])
    p.add_argument("--p", type=_positive_int, nargs="+", default=[100])
    p.add_argument("--rho", type=float, help="AR(1) correlation (model default if omitted)")
    p.add_argument("--reps", type=_positive_int, default=200)
    p.add_argument("--balance", action="store_true",
                   help="also record population/treated/control means of mu_1 per replicate")

    p = sub.add_parser("diagnose", help="covariate balance and association diagnostics")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--weights", help="weight CSV from 'confbal weights' instead of refitting")
    p.add_argument("--discrete-threshold", type=int, default=10,
                   help="covariates with at most this many distinct values are discrete")
    return parser


# -- helpers ------------------------------------------------------------------

def _methods(args):
    names = args.method or [Method.RF_KERNEL_MMD.value]
    out = []
    for name in names:
        if name == "all":
            out.extend(ALL_METHODS)
            continue
        try:
            out.append(Method(name))
        except ValueError:
            raise UsageError(f"unknown method {name!r}") from None
    return list(dict.fromkeys(out))


def _config(args) -> EstimateConfig:
    base = EstimateConfig()
    forest, prop = base.forest, base.propensity_forest
    if args.trees is not None:
        forest = replace(forest, m=args.trees)
        prop = replace(prop, m=args.trees)
    if args.mtry is not None:
        forest = replace(forest, mtry=args.mtry)
    if args.min_node is not None:
        forest = replace(forest, min_node=args.min_node)
    if args.lam is not None and not (np.isfinite(args.lam) and args.lam >= 0):
        raise UsageError("--lambda must be finite and >= 0")
    if not 0.0 < args.fit_fraction < 1.0:
        raise UsageError("--fit-fraction must lie in (0, 1)")
    return replace(base, forest=forest, propensity_forest=prop, lam=args.lam,
                   nonneg=not args.no_nonneg, fit_fraction=args.fit_fraction,
                   seed=args.seed, threads=args.threads)


def _load(args):
    cov = args.covariates
    cov = "rest" if cov == "rest" else [c.strip() for c in cov.split(",") if c.strip()]
    return load_csv(args.input, args.outcome, args.treatment, cov)


def _check_mtry(config, p):
    if config.forest.mtry is not None and config.forest.mtry > p:
        raise UsageError(f"--mtry {config.forest.mtry} exceeds the number of covariates ({p})")


def _path(args, name):
    return os.path.join(args.out_dir, name)


# -- subcommands --------------------------------------------------------------

def cmd_weights(args, config):
    d = _load(args)
    _check_mtry(config, d.p)
    config = replace(config, record_trace=True)
    out = []
    for m in _methods(args):
        est = estimate_ate(d, m, config)
        rows = np.flatnonzero(est.eval_mask)
        write_weights_csv(_path(args, f"weights_{m}.csv"), est.weights[rows], d.A[rows], rows)
        if est.solution is not None:
            write_trace_csv(_path(args, f"trace_{m}.csv"), est.solution.trace)
        if "forest" in est.diagnostics:
            save_forest(est.diagnostics["forest"], _path(args, f"forest_{m}.bin"))
        if args.export_gram and "gram" in est.diagnostics:
            write_gram_csv(est.diagnostics["gram"], _path(args, f"gram_{m}.csv"))
        info = {"method": str(m), "rows_weighted": int(rows.size)}
        if est.solution is not None:
            info.update(objective=est.solution.objective, iterations=est.solution.iterations,
                        converged=est.solution.converged)
        out.append(info)
        print(f"{m}: wrote weights for {rows.size} rows")
    return {"outputs": out}


def cmd_ate(args, config):
    d = _load(args)
    _check_mtry(config, d.p)
    if args.bootstrap == 1 or args.bootstrap < 0:
        raise UsageError("--bootstrap must be 0 or at least 2")
    lines = ["method,tau_hat,se,n,p,seed"]
    results = []
    for m in _methods(args):
        est = estimate_ate(d, m, config)
        append_result_row(_path(args, "results.csv"), est, d, config.seed)
        se = float("nan")
        if args.bootstrap:
            boot = bootstrap_se(d, m, args.bootstrap, config.seed, config,
                                threads=config.threads or 1)
            se = boot.se
            with open(_path(args, f"bootstrap_{m}.csv"), "w", encoding="utf-8") as fh:
                fh.write("replicate,estimate\n")
                for b, v in enumerate(boot.estimates):
                    fh.write(f"{b},{v:.17g}\n")
        se_text = "NA" if np.isnan(se) else format(se, ".17g")
        lines.append(f"{m},{est.tau_hat:.17g},{se_text},{d.n},{d.p},{config.seed}")
        results.append({"method": str(m), "tau_hat": est.tau_hat, "se": None if np.isnan(se) else se})
        print(f"{m:<14} tau_hat={est.tau_hat:.6f}" + ("" if np.isnan(se) else f"  se={se:.6f}"))
    with open(_path(args, "estimates.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return {"results": results}


def cmd_simulate(args, config):
    methods = _methods(args) if args.method else list(ALL_METHODS)
    combined = SimulationReport()
    summaries = []
    for n in args.n:
        for p in args.p:
            spec = DgpSpec(args.model, n, p, rho=args.rho, seed=config.seed)
            _check_mtry(config, p)
            rep = run_experiment(spec, methods, args.reps, config.seed, config, balance=args.balance)
            combined.rows.extend(rep.rows)
            for m, s in rep.summary().items():
                summaries.append({"model": args.model, "n": n, "p": p, "method": m, **s})
            print(f"model={args.model} n={n} p={p} reps={args.reps}")
            print(rep.summary_text())
    combined.write_csv(_path(args, "simulation.csv"))
    keys = ["model", "n", "p", "method", "reps", "failed", "mean_bias", "abs_mean_bias",
            "sd", "mc_se", "rmse", "q1", "median", "q3"]
    with open(_path(args, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for s in summaries:
            fh.write(",".join(_cell(s.get(k, "")) for k in keys) + "\n")
    return {"cells": len(args.n) * len(args.p), "rows": len(combined.rows)}


def cmd_diagnose(args, config):
    d = _load(args)
    assoc = association_stats(d, args.discrete_threshold)
    assoc.write_csv(_path(args, "association.csv"))
    if args.weights:
        w, mask = read_weights_csv(args.weights, d.n)
        runs = [("file", w, mask)]
    else:
        _check_mtry(config, d.p)
        runs = []
        for m in _methods(args):
            est = estimate_ate(d, m, config)
            runs.append((str(m), est.weights, est.eval_mask))
    for label, w, mask in runs:
        rep = balance_report(d, w, mask)
        rep.write_csv(_path(args, f"balance_{label}.csv"))
        rep.write_love_plot_csv(_path(args, f"loveplot_{label}.csv"))
        print(f"{label}: mean SMD {np.nanmean(rep.column('smd_before')):.4f} -> "
              f"{np.nanmean(rep.column('smd_after')):.4f}")
    return {"smd_convention": SMD_CONVENTION, "weights": [r[0] for r in runs]}


def _cell(v):
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


COMMANDS = {"weights": cmd_weights, "ate": cmd_ate, "simulate": cmd_simulate,
            "diagnose": cmd_diagnose}


# -- entry point --------------------------------------------------------------

def _expand_config(argv):
    """Replace a leading ``--config FILE`` by the argv recorded in that metadata file."""
    if argv and argv[0].startswith("--config"):
        if "=" in argv[0]:
            path, rest = argv[0].split("=", 1)[1], argv[1:]
        elif len(argv) >= 2:
            path, rest = argv[1], argv[2:]
        else:
            raise UsageError("--config needs a metadata file")
        try:
            with open(path, encoding="utf-8") as fh:
                recorded = json.load(fh)["argv"]
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read run metadata from {path}: {exc}") from None
        return list(recorded) + list(rest)
    return list(argv)


def _emit_error(exc, code):
    line = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    start = time.perf_counter()
    try:
        argv = _expand_config(argv)
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = secrets.randbits(31)
            argv = argv + ["--seed", str(args.seed)]
        if args.threads is None:
            args.threads = default_threads()
        config = _config(args)
        os.makedirs(args.out_dir, exist_ok=True)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            extra = COMMANDS[args.command](args, config)
        for c in caught:
            print(json.dumps({"warning": c.category.__name__, "message": str(c.message)}),
                  file=sys.stderr)
    except ConfbalError as exc:
        _emit_error(exc, exc.exit_code)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        code = 2 if isinstance(exc, (ValueError, FileNotFoundError)) else 1
        _emit_error(exc, code)
        return code
    except Exception as exc:  # numerical or unexpected failure
        _emit_error(exc, 1)
        return 1
    meta = {
        "command": args.command,
        "argv": argv,
        "seed": args.seed,
        "version": __version__,
        "config": _jsonable(asdict(config)),
        "wall_time_seconds": time.perf_counter() - start,
        **extra,
    }
    with open(_path(args, "metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=str)
        fh.write("\n")
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


if __name__ == "__main__":
    sys.exit(main())
