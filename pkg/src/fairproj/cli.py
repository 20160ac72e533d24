"""Command-line surface: simulate-sweep, fit, test.

Exit codes: 0 success, 2 usage/schema error, 3 assumption violation,
4 internal numeric failure.  Outputs are deterministic for a fixed seed;
wall-clock timings are only written under --emit-timings.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io
from .audit import TestConfig, run_test
from .estimation import KernelRegression, PrecomputedPolicy, fit_group_model, fit_outcome, fit_propensity
from .exceptions import (
    AssumptionViolationError,
    EstimationError,
    FairprojError,
    NumericError,
    ValidationError,
)
from .models import CompositeUtility
from .simulation import run_sweep

DEFAULT_THETAS = [0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9]
DEFAULT_RS = [1.2, 1.6, 2.0, 2.4, 2.8]
DEFAULT_EPSS = [0.01]


def _threads(requested: int) -> int:
    cap = os.environ.get("AUDIT_THREADS")
    if cap is not None:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise ValidationError(f"AUDIT_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairproj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate-sweep", help="run the synthetic pricing sweep")
    sim.add_argument("--theta1", type=float, nargs="+", default=DEFAULT_THETAS)
    sim.add_argument("--r", type=float, nargs="+", default=DEFAULT_RS)
    sim.add_argument("--eps", type=float, nargs="+", default=DEFAULT_EPSS)
    sim.add_argument("--n", type=int, default=500)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--replications", type=int, default=1)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--config", default=None)
    sim.add_argument("--out", required=True, help="sweep CSV path; summary JSON lands beside it")
    sim.add_argument("--emit-timings", action="store_true")

    fit = sub.add_parser("fit", help="fit propensity/outcome models from a CSV dataset")
    fit.add_argument("--data", required=True)
    fit.add_argument("--reg", type=float, default=1e-4)
    fit.add_argument("--bandwidth", type=float, default=None)
    fit.add_argument("--out", required=True)

    test = sub.add_parser("test", help="run the hypothesis test on a CSV dataset")
    test.add_argument("--data", required=True)
    test.add_argument("--config", default=None)
    test.add_argument("--seed", type=int, default=None)
    test.add_argument("--threads", type=int, default=1)
    test.add_argument("--out", required=True)
    test.add_argument("--emit-timings", action="store_true")
    return parser


def _summary_path(out: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + ".summary.json"


def cmd_simulate(args) -> int:
    cfg = io.load_config(args.config)
    solver_cfg = io.solver_config_from(cfg)
    boot_cfg = io.bootstrap_config_from(cfg)
    threads = _threads(args.threads)
    if args.replications < 1:
        raise ValidationError("--replications must be at least 1")
    results = []
    for rep in range(args.replications):
        rep_seed = args.seed if args.replications == 1 else int(np.random.SeedSequence([args.seed, rep]).generate_state(1)[0])
        results.append(
            run_sweep(
                args.theta1,
                args.r,
                args.eps,
                args.n,
                args.alpha,
                rep_seed,
                solver_cfg=solver_cfg,
                boot_cfg=boot_cfg,
                threads=threads,
            )
        )
    if args.replications == 1:
        io.write_sweep_csv(results[0], args.out, emit_timings=args.emit_timings)
    else:
        header = ["rep", "theta1", "r", "eps", "statistic", "critical_value", "reject", "boundary_hit", "status"]
        lines = [",".join(header)]
        for rep, res in enumerate(results):
            for row in res.rows:
                lines.append(
                    ",".join(
                        [
                            str(rep),
                            io.fmt_float(row.theta1),
                            io.fmt_float(row.r),
                            io.fmt_float(row.eps),
                            io.fmt_float(row.statistic),
                            io.fmt_float(row.critical_value),
                            str(int(row.reject)),
                            str(int(row.boundary_hit)),
                            row.status,
                        ]
                    )
                )
        io.atomic_write(args.out, "\n".join(lines) + "\n")

    n_err = sum(1 for res in results for row in res.rows if row.status != "ok")
    cells = {}
    for res in results:
        for row in res.rows:
            key = (row.theta1, row.r, row.eps)
            cells.setdefault(key, []).append(row.reject if row.status == "ok" else None)
    summary = {
        "kind": "sweep-summary",
        "seed": args.seed,
        "n": args.n,
        "alpha_level": args.alpha,
        "replications": args.replications,
        "grid": {"theta1": args.theta1, "r": args.r, "eps": args.eps},
        "error_rows": n_err,
        "cells": [
            {
                "theta1": th,
                "r": r,
                "eps": e,
                "rejection_rate": (
                    float(np.mean([v for v in flags if v is not None])) if any(v is not None for v in flags) else None
                ),
            }
            for (th, r, e), flags in sorted(cells.items())
        ],
    }
    io.atomic_write(_summary_path(args.out), io.dump_json(summary))
    if n_err:
        print(f"warning: {n_err} cell(s) recorded errors", file=sys.stderr)
    return 0


def _models_from_csv(path: str, cfg: dict):
    space = None
    if cfg.get("space"):
        from .models import CovariateSpace

        space = CovariateSpace(lower=cfg["space"]["lower"], upper=cfg["space"]["upper"])
    data, scores = io.read_dataset_csv(path, space=space)
    reg = cfg["estimation"]["reg"]
    bandwidth = cfg["estimation"]["bandwidth"]
    if scores is not None:
        smooths = tuple(KernelRegression(bandwidth=bandwidth).fit(data.X, scores[:, a]) for a in (0, 1))
        step = 1e-5 * float(np.min(data.space.upper - data.space.lower))
        policy = PrecomputedPolicy(fns=tuple(sm.predict for sm in smooths), step=step)
    else:
        policy = fit_propensity(data, reg=reg)
    utility = fit_outcome(data, bandwidth=bandwidth, reg=reg)
    return data, CompositeUtility(policy=policy, utility=utility, space=data.space)


def cmd_test(args) -> int:
    cfg = io.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    data, model = _models_from_csv(args.data, cfg)
    config = TestConfig(
        r=cfg["r"],
        eps=cfg["eps"],
        alpha_level=cfg["alpha_level"],
        solver=io.solver_config_from(cfg),
        bootstrap=io.bootstrap_config_from(cfg),
    )
    try:
        report = run_test(model, data, config, seed=cfg["seed"])
    except AssumptionViolationError as exc:
        doc = {
            "kind": "assumption-violation",
            "violations": exc.report.violations,
            "details": {k: float(v) for k, v in exc.report.details.items()},
        }
        io.atomic_write(args.out, io.dump_json(doc))
        print(f"assumption violation: {exc}", file=sys.stderr)
        return 3
    doc = report.to_dict(include_timings=args.emit_timings)
    io.validate_report(doc)
    io.atomic_write(args.out, io.dump_json(doc))
    print(f"statistic={report.statistic!r} critical_value={report.critical_value!r} reject={report.reject}")
    return 0


def cmd_fit(args) -> int:
    data, scores = io.read_dataset_csv(args.data)
    policy = fit_propensity(data, reg=args.reg)
    groups = fit_group_model(data, reg=args.reg)
    utility = fit_outcome(data, bandwidth=args.bandwidth, reg=args.reg)
    doc = {
        "kind": "fit-summary",
        "n": data.n,
        "dim": data.dim,
        "reg": args.reg,
        "propensity": {
            str(a): {
                "weights": [float(v) for v in policy.models[a].coef_],
                "bias": policy.models[a].intercept_,
                "iterations": policy.models[a].n_iter_,
                "final_loss": float(policy.models[a].loss_path_[-1]),
            }
            for a in (0, 1)
        },
        "group_model": {
            "weights": [float(v) for v in groups.model.coef_],
            "bias": groups.model.intercept_,
        },
        "outcome_cells": {
            f"w={w},s={a}": {
                "n": int(utility.cells[(w, a)].centers_.shape[0]),
                "bandwidth": [float(h) for h in utility.cells[(w, a)].bandwidth_],
            }
            for w in (0, 1)
            for a in (0, 1)
        },
        "has_score_columns": scores is not None,
    }
    io.atomic_write(args.out, io.dump_json(doc))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "simulate-sweep":
            return cmd_simulate(args)
        if args.command == "test":
            return cmd_test(args)
        if args.command == "fit":
            return cmd_fit(args)
        raise ValidationError(f"unknown command {args.command!r}")
    except (ValidationError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FairprojError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
