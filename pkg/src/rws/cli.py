"""Command-line interface: ``rws <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (nml_batch_average, nml_full, nw_batch_average, nw_full,
                       spline_batch_average, spline_full)
from .bench import (ESTIMATORS, ExperimentConfig, rate_check, read_results_csv, results_csv,
                    run_experiment, summary_table, write_results_csv)
from .data import PooledDataset
from .errors import ConfigError, RWSError
from .estfun import BUILTINS, get_estfun
from .kernel import GAUSSIAN, RATE_EXPONENT, default_cv_grid, select_cv_constant
from .renew import EvaluationGrid, RenewableState, evaluate, update_closed_form, update_newton
from .simgen import MODELS, StreamPlan, generate_stream, get_model
from .spline import SplineBasis, SplineState, basis_eval, select_knot_count, solve_spline, update_spline
from .store import load_state, read_batch_csv, save_state, write_batch_csv

log = logging.getLogger("rws")

STREAMING = ("rws-hf", "rws-hk", "rws-knf", "rws-kn1")
FIT_ESTIMATORS = tuple(e.lower().replace("_", "-") for e in ESTIMATORS)


class UsageError(Exception):
    """Invalid flag combination detected after argument parsing."""


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (v > 0 and np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive and finite, got {text}")
    return v


def _trim(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= v < 0.5:
        raise argparse.ArgumentTypeError(f"trim must lie in [0, 0.5), got {v}")
    return v


def _default_threads():
    env = os.environ.get("RWS_THREADS")
    if env is None:
        return 1
    try:
        return _positive_int(env)
    except argparse.ArgumentTypeError:
        return 1


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(args, out):
    m = get_model(args.model)
    plan = StreamPlan(args.n, args.batch_size, args.seed, args.replication)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(plan.n_batches)))
    for b in generate_stream(m, plan):
        path = outdir / f"batch_{b.index:0{width}d}.csv"
        write_batch_csv(b, path)
        out.write(f"{path}\t{len(b)}\n")
    return 0


# --------------------------------------------------------------------------
# fit-stream
# --------------------------------------------------------------------------

def _batch_files(inputs):
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files.extend(sorted(p.glob("*.csv")))
        else:
            files.append(p)
    return files


def _cv_candidates(args):
    if args.cv_range is None:
        return default_cv_grid()
    lo, hi = args.cv_range
    if not 0 < lo < hi:
        raise UsageError("--cv-range needs 0 < LOW < HIGH")
    return default_cv_grid(lo, hi)


def _check_snapshot(snap, args, est):
    """Reject flags that contradict the snapshot being resumed."""
    if snap.estimator != est:
        raise ConfigError(f"snapshot was written by {snap.estimator!r}, not {est!r}")
    if est in ("rws-hf", "rws-hk") and snap.estfun != args.estfun:
        raise ConfigError(f"snapshot uses estimating function {snap.estfun!r}, not {args.estfun!r}")
    if snap.kernel != "gaussian":
        raise ConfigError(f"snapshot kernel {snap.kernel!r} is not supported")
    st = snap.state
    if isinstance(st, RenewableState):
        g = st.grid
        if args.grid_points is not None and args.grid_points != g.size:
            raise ConfigError(f"--grid-points {args.grid_points} differs from snapshot grid ({g.size})")
        if args.support is not None and tuple(args.support) != g.support:
            raise ConfigError(f"--support {tuple(args.support)} differs from snapshot {g.support}")
        if args.trim is not None and args.trim != g.trim:
            raise ConfigError(f"--trim {args.trim} differs from snapshot trim {g.trim}")
    bw = snap.bandwidth
    if args.bandwidth is not None and bw.get("h") not in (None, args.bandwidth):
        raise ConfigError(f"--bandwidth {args.bandwidth} differs from snapshot bandwidth {bw['h']}")
    if args.bandwidth_constant is not None and bw.get("constant") not in (None, args.bandwidth_constant):
        raise ConfigError("--bandwidth-constant differs from the snapshot's constant")
    if args.knots is not None and isinstance(st, SplineState) and args.knots != st.basis.knots.size:
        raise ConfigError(f"--knots {args.knots} differs from snapshot ({st.basis.knots.size} knots)")


def _kernel_stream(args, est, batches, f, snap, out_state):
    if snap is not None:
        state = snap.state
        bw = dict(snap.bandwidth)
    else:
        first = batches[0]
        if args.support is not None:
            a, b = args.support
        else:
            a, b = float(first.xs.min()), float(first.xs.max())
        grid = EvaluationGrid.uniform(a, b, args.grid_points or 401,
                                      0.05 if args.trim is None else args.trim)
        state = RenewableState.fresh(grid, f.dim)
        if est == "rws-hk":
            c = args.bandwidth_constant
            if c is None:
                c = select_cv_constant(first, GAUSSIAN, _cv_candidates(args))
            bw = {"mode": "schedule", "constant": c, "exponent": RATE_EXPONENT}
        else:
            h = args.bandwidth
            if h is None:
                c = args.bandwidth_constant
                if c is None:
                    c = select_cv_constant(first, GAUSSIAN, _cv_candidates(args))
                total = sum(len(b) for b in batches)
                h = c * float(total) ** RATE_EXPONENT
            bw = {"mode": "fixed", "h": h}
    closed = f.name == "mean" and not args.newton
    for b in batches:
        if bw["mode"] == "schedule":
            h = bw["constant"] * float(state.cumulative_n + len(b)) ** bw["exponent"]
        else:
            h = bw["h"]
        if closed:
            state = update_closed_form(state, b, h, GAUSSIAN)
        else:
            state = update_newton(state, b, h, GAUSSIAN, f)
    if state.nonconverged:
        log.warning("%d grid-point solves did not converge", state.nonconverged)
    if out_state:
        save_state(state, out_state, estimator=est, estfun=f.name, bandwidth=bw)
    return state.as_estimate()


def _spline_stream(args, est, batches, snap, out_state):
    if snap is not None:
        state = snap.state
    else:
        if est == "rws-kn1":
            src = PooledDataset(batches[0].xs, batches[0].ys)
        else:
            src = PooledDataset.from_batches(batches)
        if args.support is not None:
            a, b = args.support
        else:
            a, b = float(src.xs.min()), float(src.xs.max())
        count = args.knots if args.knots is not None else select_knot_count(src.xs, src.ys, a=a, b=b)
        state = SplineState.fresh(SplineBasis.equidistant(a, b, count))
    for b in batches:
        state = update_spline(state, b)
    if out_state:
        save_state(state, out_state, estimator=est, estfun="mean", bandwidth={})
    return state


def _pooled_fit(args, est, batches, f):
    data = PooledDataset.from_batches(batches)
    if args.support is not None:
        a, b = args.support
    else:
        a, b = float(data.xs.min()), float(data.xs.max())
    grid = EvaluationGrid.uniform(a, b, args.grid_points or 401,
                                  0.05 if args.trim is None else args.trim)
    if est in ("csp-f", "csp-a"):
        count = args.knots if args.knots is not None else select_knot_count(data.xs, data.ys, a=a, b=b)
        basis = SplineBasis.equidistant(a, b, count)
        if est == "csp-f":
            return ("spline", basis, spline_full(data, basis))
        return ("grid", spline_batch_average(batches, basis, grid))
    if args.bandwidth is not None and est.endswith("-a"):
        hs = [args.bandwidth] * len(batches)
    else:
        c = args.bandwidth_constant
        if c is None and args.bandwidth is None:
            c = select_cv_constant(data, GAUSSIAN, _cv_candidates(args))
        if est.endswith("-a"):
            hs = [c * float(len(b)) ** RATE_EXPONENT for b in batches]
        else:
            h = args.bandwidth if args.bandwidth is not None else c * float(data.n) ** RATE_EXPONENT
    if est == "nwe-f":
        return ("grid", nw_full(data, h, GAUSSIAN, grid) if f.name == "mean"
                else nml_full(data, h, GAUSSIAN, f, grid))
    if est == "nml-f":
        return ("grid", nml_full(data, h, GAUSSIAN, f, grid))
    if est == "nwe-a" and f.name == "mean":
        return ("grid", nw_batch_average(batches, hs, GAUSSIAN, grid))
    return ("grid", nml_batch_average(batches, hs, GAUSSIAN, f, grid))


def _write_estimates(rows, dim, out):
    head = ["x", "estimate"] + [f"estimate{d + 1}" for d in range(1, dim)]
    lines = [",".join(head)]
    for x, v in rows:
        lines.append(",".join([format(x, ".17g")] + [format(t, ".17g") for t in v]))
    out.write("\n".join(lines) + "\n")


def cmd_fit_stream(args, out):
    est = args.estimator
    f = get_estfun(args.estfun)
    spline = est in ("rws-knf", "rws-kn1", "csp-f", "csp-a")
    if spline and args.estfun != "mean":
        raise UsageError(f"{est} fits the mean curve only; drop --estfun {args.estfun}")
    if est in ("nwe-f", "nwe-a") and args.estfun == "gamma":
        raise UsageError(f"{est} is a mean-regression estimator; use nml-f/nml-a with --estfun gamma")
    if args.bandwidth is not None and args.bandwidth_constant is not None:
        raise UsageError("--bandwidth and --bandwidth-constant are mutually exclusive")
    if spline and (args.bandwidth is not None or args.bandwidth_constant is not None):
        raise UsageError("spline estimators take --knots, not bandwidth flags")
    if est == "rws-hk" and args.bandwidth is not None:
        raise UsageError("rws-hk follows a schedule; use --bandwidth-constant, not --bandwidth")
    if not spline and args.knots is not None:
        raise UsageError("--knots applies to spline estimators only")
    if est not in STREAMING and (args.state_in or args.state_out):
        raise UsageError(f"{est} keeps no renewable state; --state-in/--state-out need one of {', '.join(STREAMING)}")
    files = _batch_files(args.inputs)
    if not files:
        raise UsageError("no batch files given")
    batches = [read_batch_csv(p, index=i + 1) for i, p in enumerate(files)]

    snap = None
    if args.state_in:
        snap = load_state(args.state_in)
        _check_snapshot(snap, args, est)

    if est in ("rws-hf", "rws-hk"):
        estimate = _kernel_stream(args, est, batches, f, snap, args.state_out)
        kind = "grid"
    elif est in ("rws-knf", "rws-kn1"):
        state = _spline_stream(args, est, batches, snap, args.state_out)
        kind, basis, coef = "spline", state.basis, solve_spline(state)
    else:
        res = _pooled_fit(args, est, batches, f)
        kind = res[0]
        if kind == "spline":
            basis, coef = res[1], res[2]
        else:
            estimate = res[1]

    if kind == "spline":
        if args.eval_points is not None:
            xs = np.asarray(args.eval_points, dtype=np.float64)
        else:
            a, b = args.support if args.support is not None else basis.support
            xs = np.linspace(a, b, args.grid_points or 401)
        vals = basis_eval(basis, xs) @ coef
        rows = [(x, [v]) for x, v in zip(xs.tolist(), vals.tolist())]
        dim = 1
    else:
        dim = estimate.dim
        if args.eval_points is not None:
            rows = []
            for x in args.eval_points:
                v = evaluate(estimate, x)
                rows.append((x, [float("nan")] * dim if v is None else v.tolist()))
        else:
            vals = np.where(estimate.defined[:, None], estimate.values, np.nan)
            rows = list(zip(estimate.grid.points.tolist(), vals.tolist()))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            _write_estimates(rows, dim, fh)
    else:
        _write_estimates(rows, dim, out)
    return 0


# --------------------------------------------------------------------------
# run-experiment, rate-check, inspect-state
# --------------------------------------------------------------------------

def bundled_configs():
    root = resources.files("rws") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".toml"))


def _resolve_config(name):
    p = Path(name)
    if p.exists():
        return p
    stem = name if name.endswith(".toml") else name + ".toml"
    if stem in bundled_configs():
        return resources.files("rws") / "configs" / stem
    raise UsageError(f"config {name!r} not found (bundled: {', '.join(bundled_configs())})")


def cmd_run_experiment(args, out):
    if args.list:
        out.write("\n".join(bundled_configs()) + "\n")
        return 0
    if args.config is None:
        raise UsageError("a config file is required")
    path = _resolve_config(args.config)
    with resources.as_file(path) as real:
        cfg = ExperimentConfig.from_toml(real)
    overrides = {k: v for k, v in (("replications", args.replications), ("seed", args.seed),
                                   ("trim", args.trim), ("grid_points", args.grid_points))
                 if v is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    rows = run_experiment(cfg, threads=args.threads)
    if args.out:
        write_results_csv(rows, args.out)
        out.write(summary_table(rows) + "\n")
    else:
        out.write(results_csv(rows))
        sys.stderr.write(summary_table(rows) + "\n")
    return 0


def cmd_rate_check(args, out):
    rows = read_results_csv(args.results)
    comps = sorted({r.component for r in rows if r.estimator == args.estimator})
    comp = args.component or (comps[0] if comps else None)
    slope = rate_check(rows, args.estimator, comp)
    out.write(f"{args.estimator} {comp} slope {slope:.6f}\n")
    return 0


def cmd_inspect_state(args, out):
    snap = load_state(args.snapshot)
    st = snap.state
    info = {"format_version": snap.format_version, "checksum": f"{snap.checksum:016x}",
            "estimator": snap.estimator, "estfun": snap.estfun, "kernel": snap.kernel,
            "bandwidth": snap.bandwidth, "batch_count": st.batch_count,
            "cumulative_n": st.cumulative_n}
    if isinstance(st, RenewableState):
        info.update(kind="kernel", dim=st.dim, grid_points=st.grid.size,
                    support=list(st.grid.support), trim=st.grid.trim,
                    defined_points=int(st.defined_mask.sum()),
                    nonconverged=st.nonconverged)
    else:
        info.update(kind="spline", knots=st.basis.knots.tolist(),
                    support=list(st.basis.support), basis_dim=st.basis.basis_dim)
    out.write(json.dumps(info, indent=2) + "\n")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="rws", description="Renewable streaming kernel and spline estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a simulated stream as batch CSV files")
    s.add_argument("--model", required=True, choices=sorted(MODELS))
    s.add_argument("--n", required=True, type=_positive_int, help="total observations")
    s.add_argument("--batch-size", required=True, type=_positive_int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replication", type=int, default=0, help="replication id (sub-stream key)")
    s.add_argument("--out", default=".", help="output directory (default: current)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit-stream", help="fit an estimator to batch CSV files in filename order")
    s.add_argument("inputs", nargs="*", help="batch CSV files or directories of them")
    s.add_argument("--estimator", required=True, choices=FIT_ESTIMATORS)
    s.add_argument("--estfun", default="mean", choices=sorted(BUILTINS))
    s.add_argument("--bandwidth", type=_positive_float, help="fixed bandwidth h")
    s.add_argument("--bandwidth-constant", type=_positive_float,
                   help="c in h = c * N^(-1/5); chosen by cross-validation when omitted")
    s.add_argument("--cv-range", nargs=2, type=_positive_float, metavar=("LOW", "HIGH"),
                   help="range of the 16-point geometric grid of CV constants")
    s.add_argument("--knots", type=_positive_int, help="interior knot count for spline estimators")
    s.add_argument("--grid-points", type=_positive_int, help="evaluation grid size (default 401)")
    s.add_argument("--support", nargs=2, type=float, metavar=("A", "B"),
                   help="grid interval (default: range of the first batch for streaming "
                        "estimators, of all data otherwise)")
    s.add_argument("--trim", type=_trim, help="boundary trim fraction stored with the grid (default 0.05)")
    s.add_argument("--newton", action="store_true",
                   help="use the Newton update even for mean regression")
    s.add_argument("--state-in", help="resume from this snapshot")
    s.add_argument("--state-out", help="write the final state to this snapshot")
    s.add_argument("--eval-points", nargs="+", type=float, metavar="X",
                   help="report at these x values (default: the grid)")
    s.add_argument("--out", help="estimates CSV path (default: stdout)")
    s.set_defaults(func=cmd_fit_stream)

    s = sub.add_parser("run-experiment", help="run a Monte-Carlo experiment config")
    s.add_argument("config", nargs="?", help="TOML config path or bundled config name")
    s.add_argument("--list", action="store_true", help="list bundled configs")
    s.add_argument("--out", help="results CSV path (default: stdout; summary goes to stderr)")
    s.add_argument("--threads", type=_positive_int, default=_default_threads(),
                   help="worker threads (default: $RWS_THREADS or 1)")
    s.add_argument("--replications", type=_positive_int)
    s.add_argument("--seed", type=int)
    s.add_argument("--trim", type=_trim)
    s.add_argument("--grid-points", type=_positive_int)
    s.set_defaults(func=cmd_run_experiment)

    s = sub.add_parser("rate-check", help="log-log slope of MISE against n from a results CSV")
    s.add_argument("results")
    s.add_argument("--estimator", default="NWE_f")
    s.add_argument("--component")
    s.set_defaults(func=cmd_rate_check)

    s = sub.add_parser("inspect-state", help="print a snapshot's metadata")
    s.add_argument("snapshot")
    s.set_defaults(func=cmd_inspect_state)
    return p


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"rws {args.command}: error: {exc}\n")
        return 2
    except (RWSError, OSError, ValueError) as exc:
        sys.stderr.write(f"rws {args.command}: error: {exc}\n")
        return 1


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
