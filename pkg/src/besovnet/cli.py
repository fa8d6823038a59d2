"""Command-line entry point.

Every subcommand writes its artifacts under ``--out`` and prints a JSON
summary on stdout.  Output depends only on the configuration and ``--seed``;
wall-clock columns stay 0 unless ``--timing`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys

import numpy as np
import yaml

from . import besov_synth as bs
from . import harness
from .constructive_approx import (
    RATE_COLUMNS,
    BudgetInfeasible,
    GadgetBudget,
    approx_rate_sweep,
    bspline_net_certified,
    bspline_reference,
    hyperparams_for_n,
    sample_size_budget,
)
from .priors import NetShape, check_conditions, prior_from_dict
from .serial import DocumentError, decode_real, dumps, encode_real, require
from .spline_core import BesovParams

log = logging.getLogger("besovnet")


class UsageError(Exception):
    pass


def _load_config(path):
    if path is None:
        raise UsageError("this subcommand needs --config")
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise DocumentError("<root>", f"not valid YAML or JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DocumentError("<root>", "expected a mapping at the top level")
    return doc


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def _csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([harness._fmt(v) for v in r])
    return buf.getvalue()


def _seed(args, doc):
    if args.seed is not None:
        return args.seed
    return int(doc.get("seed", 0))


# subcommands


def cmd_synth(args):
    doc = _load_config(args.config)
    block = dict(require(doc, "target"))
    if args.seed is not None and "generator" in block:
        block["seed"] = args.seed
    target, s_tilde = harness.target_from_config(block)
    per_axis = int(doc.get("grid_per_axis", 21))
    X = bs.grid_points(target.d, per_axis)
    y = target(X)
    cols = [f"x_{i + 1}" for i in range(target.d)] + ["f"]
    _write(args.out, "target.json", _dump(target.to_dict()))
    _write(args.out, "samples.csv", _csv(cols, np.column_stack([X, y]).tolist()))
    return {"kind": target.kind, "d": target.d, "s_tilde": s_tilde, "points": len(X),
            "max_abs": float(np.max(np.abs(y)))}


def _bspline_grid_report(net, d, m, per_axis):
    # one grid over the support and one that overshoots it by half a unit
    inside = bs.grid_points(d, per_axis) * (m + 1)
    err = float(np.max(np.abs(net(inside) - bspline_reference(d, m, inside))))
    wide = bs.grid_points(d, per_axis) * (m + 2) - 0.5
    off = np.any((wide < 0) | (wide > m + 1), axis=1)
    outside = float(np.max(np.abs(net(wide[off])))) if off.any() else 0.0
    return err, outside


def cmd_bspline_net(args):
    if args.d is None or args.m is None or args.eps is None:
        raise UsageError("bspline-net needs --d, --m and --eps")
    net, cert = bspline_net_certified(args.d, args.m, GadgetBudget(args.eps))
    per_axis = max(2, int(round(20000 ** (1.0 / args.d))))
    err, outside = _bspline_grid_report(net, args.d, args.m, per_axis)
    report = {
        "d": args.d, "m": args.m, "eps": args.eps,
        "grid_error": err, "outside_max": outside, "certified_error": cert.certified_error,
        "realized": {"L": cert.L, "D": cert.D, "S": cert.S, "B": cert.B},
        "formula": cert.formula,
        "within_eps": bool(err <= args.eps),
    }
    _write(args.out, "network.json", _dump(net.to_dict()))
    _write(args.out, "certificate.json", _dump(report))
    return report


def cmd_approx_rate(args):
    doc = _load_config(args.config)
    seed = _seed(args, doc)
    params = BesovParams.from_dict(require(doc, "params"), "params")
    K = int(doc.get("K", 7))
    r = decode_real(doc.get("r", 2.0), "r")
    N_grid = [int(N) for N in require(doc, "N_grid")]
    if not N_grid or any(N < 1 for N in N_grid):
        raise DocumentError("N_grid", "expected positive integers")
    rng = np.random.default_rng(seed)
    coeffs = bs.sample_besov_ball(rng, params, K, float(doc.get("radius", 1.0)), r=r)
    target = bs.spline_series(coeffs, normalize=True)
    scaled = coeffs.scaled(target.scale)
    rows = approx_rate_sweep(scaled, N_grid, r=r, n_points=int(doc.get("n_points", 20000)),
                             seed=seed, timing=args.timing)
    for row in rows:
        log.info("N=%d L=%d S=%d error=%.4g", row["N"], row["L"], row["S"], row["error_L2"])
    _write(args.out, "target.json", _dump(target.to_dict()))
    _write(args.out, "rates.csv", _csv(RATE_COLUMNS, [[row[c] for c in RATE_COLUMNS] for row in rows]))
    out = {"s_tilde": params.s.s_tilde, "rows": len(rows)}
    if len(rows) >= 2:
        x = np.log([row["N"] for row in rows])
        out["slope"] = float(np.polyfit(x, np.log([row["error_L2"] for row in rows]), 1)[0])
        out["sparsity_ratio"] = [row["S"] / (row["N"] * max(math.log(row["N"]), 1.0)) for row in rows]
    return out


def cmd_contract(args):
    doc = _load_config(args.config)
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    cfg = harness.ExperimentConfig.from_dict(doc)
    os.makedirs(args.out, exist_ok=True)
    result = harness.run_contraction_experiment(cfg, threads=args.threads,
                                                out_csv=os.path.join(args.out, "results.csv"),
                                                timing=args.timing, log=log.warning)
    summary = _summary(result.rows, float(doc.get("tolerance", 0.15)))
    _write(args.out, "summary.json", _dump(summary))
    return summary


def _summary(rows, tolerance):
    if len({r["n"] for r in rows}) < 2:
        return {"rows": len(rows), "slope": None, "pass": None}
    return harness.summary_document(rows, tolerance)


def cmd_priorcheck(args):
    doc = _load_config(args.config)
    spec = prior_from_dict(require(doc, "prior"))
    d = int(require(doc, "d"))
    s_tilde = decode_real(require(doc, "s_tilde"), "s_tilde")
    constants = dict(doc.get("shape", {}))
    report = []
    for n in require(doc, "n_grid"):
        n = int(n)
        budget = hyperparams_for_n(n, s_tilde, constants, d=d)
        shape = NetShape(d, budget.L, budget.D)
        results = check_conditions(spec, shape, n, sample_size_budget(n, s_tilde),
                                   B1=float(doc.get("B1", budget.B)), c_max=float(doc.get("c_max", 1.0)))
        report.append({"n": n, "L": shape.L, "D": shape.D, "T": shape.T,
                       "conditions": [c.to_dict() for c in results],
                       "passed": all(c.passed for c in results)})
    out = {"family": spec.family, "checks": report, "passed": all(r["passed"] for r in report)}
    _write(args.out, "priorcheck.json", _dump(out))
    return out


def cmd_report(args):
    if not args.csv:
        raise UsageError("report needs at least one results CSV")
    rows = []
    for path in args.csv:
        if not os.path.exists(path):
            raise UsageError(f"results file not found: {path}")
        with open(path) as fh:
            rows.extend(harness.read_rows(fh.read()))
    rows.sort(key=lambda r: (r["n"], r["replicate"]))
    tolerance = 0.15
    if args.config is not None:
        tolerance = float(_load_config(args.config).get("tolerance", tolerance))
    summary = _summary(rows, tolerance)
    _write(args.out, "merged.csv", harness.rows_to_csv(rows))
    _write(args.out, "summary.json", _dump(summary))
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "bspline-net": cmd_bspline_net,
    "approx-rate": cmd_approx_rate,
    "contract": cmd_contract,
    "priorcheck": cmd_priorcheck,
    "report": cmd_report,
}


def _common_flags(suppress):
    # subcommands repeat the global flags without defaults so that a flag given
    # before the subcommand is not reset by the subparser
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON configuration", **kw)
    common.add_argument("--seed", type=int, help="overrides the configuration seed", **kw)
    common.add_argument("--out", metavar="DIR", help="output directory (default: .)", **(kw or {"default": "."}))
    common.add_argument("--threads", type=int, help="worker threads for independent jobs", **(kw or {"default": 1}))
    common.add_argument("--timing", action="store_true", help="record wall-clock seconds (breaks byte-identity)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser():
    common = _common_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="besovnet", parents=[_common_flags(suppress=False)],
                                     description="Besov-class ReLU approximation and sparse Bayesian network experiments.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("synth", parents=[common], help="emit a target function and a grid sample CSV")
    p = sub.add_parser("bspline-net", parents=[common], help="compile a tensor B-spline network with an error report")
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--eps", type=float)
    sub.add_parser("approx-rate", parents=[common], help="approximation error over a sweep of term budgets N")
    sub.add_parser("contract", parents=[common], help="posterior contraction experiment over a sample-size grid")
    sub.add_parser("priorcheck", parents=[common], help="numeric check of the prior tail, floor and spike conditions")
    p = sub.add_parser("report", parents=[common], help="merge results CSVs and fit the rate slope")
    p.add_argument("csv", nargs="*", help="results CSV files")
    return parser


def _dump(doc):
    return dumps(_jsonable(doc))


def _fail(code, doc):
    sys.stderr.write(_dump(doc))
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    if args.threads < 1:
        return _fail(2, {"error": "usage", "reason": "--threads must be at least 1"})
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        out = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(2, {"error": "usage", "reason": str(exc)})
    except DocumentError as exc:
        return _fail(2, exc.to_dict())
    except BudgetInfeasible as exc:
        return _fail(3, {"error": "budget", "reason": str(exc)})
    except (ValueError, TypeError, KeyError) as exc:
        return _fail(2, {"error": "config", "reason": str(exc)})
    sys.stdout.write(_dump(out))
    return 0


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return encode_real(x) if not math.isnan(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


if __name__ == "__main__":
    sys.exit(main())
