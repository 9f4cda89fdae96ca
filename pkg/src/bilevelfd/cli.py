"""Command-line front end.

Subcommands: ``run`` (one solve, trace CSV + JSON summary + figures),
``bench`` (a benchmark across seeds, per-seed CSVs + aggregate + figures),
``verify`` (the check suite), ``snapshot`` (serialize a generated problem).

Configuration is a flat ``key = value`` text file plus flag overrides; flags
win. The output directory defaults to the BILEVELFD_OUT environment variable
when set. Exit codes: 0 success, 1 check or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, benchmarks, reports, solver, verify
from .problem import L1, BoxIndicator, Zero

PROBLEM_KINDS = ("toy", "plgame", "matsense")


class ConfigError(Exception):
    pass


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, like) -> object:
    if isinstance(like, bool):
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"config key {key}: {err}") from err
    return raw


def _apply_config_file(subparser: argparse.ArgumentParser, path: str) -> None:
    """Install file values as subparser defaults so explicit flags still win."""
    file_values = _read_config_file(path)
    dests = {a.dest for a in subparser._actions}
    typed: dict[str, object] = {}
    for key, raw in file_values.items():
        if key not in dests:
            raise ConfigError(f"unknown config key {key!r}")
        default = subparser.get_default(key)
        like = default if default is not None else ""
        typed[key] = _coerce(key, raw, like)
    subparser.set_defaults(**typed)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("BILEVELFD_OUT")
    if env:
        return Path(env)
    return Path("out")


def _build_problem(args):
    if getattr(args, "snapshot", None):
        return benchmarks.load_problem(args.snapshot)
    kind = args.problem
    if kind == "toy":
        return benchmarks.toy_problem()
    if kind == "plgame":
        return benchmarks.gen_plgame(
            d=args.d,
            l=args.l,
            n=args.n,
            mu=args.mu_interval,
            L=args.L_interval,
            seed=args.seed,
            project_coupling=args.project_coupling,
        )
    if kind == "matsense":
        return benchmarks.gen_matsense(d=args.d, r=args.r, n=args.n, seed=args.seed)
    raise ConfigError(f"unknown problem {kind!r} (choose from {', '.join(PROBLEM_KINDS)})")


def _build_hyperparams(problem, args) -> solver.HyperParams:
    hp = problem.default_hyperparams(iters=args.T, seed=args.seed)
    if args.base_lr is not None:
        hp.lr_x = hp.lr_y = hp.lr_v = args.base_lr
    for flag, attr in (
        ("lr_x", "lr_x"),
        ("lr_y", "lr_y"),
        ("lr_v", "lr_v"),
        ("fd_step", "fd_step"),
        ("v_radius", "v_radius"),
        ("hvp_cap", "hvp_cap"),
    ):
        value = getattr(args, flag)
        if value is not None:
            setattr(hp, attr, value)
    return hp


def _build_regularizer(problem, args):
    spec = args.reg
    if spec == "auto":
        return problem.regularizer()
    if spec == "zero":
        return Zero()
    if spec == "box":
        return BoxIndicator(np.array([args.box_lo]), np.array([args.box_hi]))
    if spec == "l1":
        return L1(args.l1_weight)
    raise ConfigError(f"unknown regularizer {spec!r}")


def _config_record(problem, hp, reg, args) -> dict:
    record = {
        "tool": f"bilevelfd {__version__}",
        "problem": problem.kind,
    }
    params, _ = problem.snapshot_payload()
    for key, value in params.items():
        record[f"problem_{key}"] = value
    record.update(
        {
            "T": hp.iters,
            "seed": hp.seed,
            "lr_x": hp.lr_x,
            "lr_y": hp.lr_y,
            "lr_v": hp.lr_v,
            "fd_step": hp.fd_step,
            "v_radius": hp.v_radius,
            "hvp_cap": hp.hvp_cap,
            "mu": hp.mu,
            "lip_g": hp.lip_g,
            "regularizer": repr(reg),
            "columns_lower_gap": args.with_gap,
            "columns_lyapunov": args.with_lyapunov,
            "columns_exact_grad_map": args.with_exact_grad_map,
            "timing": args.timing,
        }
    )
    return record


def _trace_options(problem, args) -> solver.TraceOptions:
    return solver.TraceOptions(
        lower_gap=args.with_gap,
        lyapunov=args.with_lyapunov,
        exact_grad_map=args.with_exact_grad_map,
        timing=args.timing,
    )


def _extra_metrics(problem):
    if problem.kind == "matsense":
        return problem.metrics
    return None


def _run_one(problem, hp, reg, args, trace_path, figures: bool):
    x0, y0, v0 = problem.default_init()
    options = _trace_options(problem, args)
    started = time.perf_counter()
    partial = None
    error = None
    try:
        result = solver.run(
            problem.oracle(),
            hp,
            reg,
            x0,
            y0,
            v0,
            options=options,
            extra_metrics=_extra_metrics(problem),
        )
        rows = result.rows
    except solver.DivergenceError as err:
        rows = err.rows
        partial = err
        error = str(err)
        result = None
    elapsed = time.perf_counter() - started

    config = _config_record(problem, hp, reg, args)
    reports.write_trace_csv(trace_path, rows, config)

    summary = {
        "config": config,
        "iterations_completed": len(rows),
        "wall_time_s": elapsed,
        "gradient_calls": rows[-1].gradient_calls if rows else 0,
        "status": "diverged" if partial else "ok",
    }
    if error:
        summary["error"] = error
    if result is not None:
        summary.update(
            {
                "x_out_index": result.t_out,
                "x_out": result.x_out.tolist() if result.x_out.size <= 50 else None,
                "x_final_norm": float(np.linalg.norm(result.x_final)),
                "y_final_norm": float(np.linalg.norm(result.y_final)),
                "final_grad_map_norm_sq": rows[-1].grad_map_norm_sq,
                "final_f": rows[-1].f_val,
                "final_g": rows[-1].g_val,
            }
        )
        if problem.kind == "toy":
            summary["x_final"] = result.x_final.tolist()
            summary["y_final"] = result.y_final.tolist()
        if rows and rows[-1].extras:
            summary["final_metrics"] = rows[-1].extras
    summary_path = trace_path.parent / (trace_path.stem + "_summary.json")
    reports.write_summary_json(summary_path, summary)

    figure_paths = []
    if figures and rows:
        figure_paths = reports.render_trace_figures(
            trace_path, trace_path.parent / "figures", title=f"{problem.kind}: gradient norm"
        )
    return result, summary_path, figure_paths, partial


def cmd_run(args) -> int:
    problem = _build_problem(args)
    hp = _build_hyperparams(problem, args)
    reg = _build_regularizer(problem, args)
    out_dir = _out_dir(args)
    trace_path = out_dir / "trace.csv"
    result, summary_path, figure_paths, partial = _run_one(
        problem, hp, reg, args, trace_path, figures=not args.no_figures
    )
    print(f"trace: {trace_path}")
    print(f"summary: {summary_path}")
    for p in figure_paths:
        print(f"figure: {p}")
    if partial is not None:
        print(f"run diverged: {partial}", file=sys.stderr)
        return 1
    last = result.rows[-1]
    print(
        f"done: T={hp.iters} grad_calls={result.gradient_calls} "
        f"final grad_map_norm_sq={last.grad_map_norm_sq:.6g} f={last.f_val:.6g}"
    )
    return 0


def cmd_bench(args) -> int:
    if args.bench_problem not in ("plgame", "matsense"):
        raise ConfigError("bench supports problems plgame and matsense")
    out_dir = _out_dir(args)
    seeds = [args.seed_base + i for i in range(args.seeds)]
    trace_paths = []
    failures = 0
    for seed in seeds:
        args.seed = seed
        args.problem = args.bench_problem
        problem = _build_problem(args)
        hp = _build_hyperparams(problem, args)
        reg = _build_regularizer(problem, args)
        name = f"{args.bench_problem}_d{args.d}_seed{seed}.csv"
        trace_path = out_dir / name
        _, _, _, partial = _run_one(problem, hp, reg, args, trace_path, figures=False)
        trace_paths.append(trace_path)
        print(f"seed {seed}: {trace_path}")
        if partial is not None:
            failures += 1
            print(f"seed {seed} diverged: {partial}", file=sys.stderr)

    aggregate_path = out_dir / f"{args.bench_problem}_d{args.d}_aggregate.csv"
    try:
        reports.aggregate_traces(trace_paths, aggregate_path, {"seeds": ",".join(map(str, seeds))})
    except ValueError as err:
        print(f"aggregation failed: {err}", file=sys.stderr)
        return 1
    print(f"aggregate: {aggregate_path}")
    if not args.no_figures:
        for p in reports.render_trace_figures(
            aggregate_path, out_dir / "figures", title=f"{args.bench_problem}: seed-averaged"
        ):
            print(f"figure: {p}")
    return 1 if failures else 0


def cmd_verify(args) -> int:
    results = verify.run_checks(level=args.level, fd_step=args.fd_step or 1e-5)
    print(verify.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_snapshot(args) -> int:
    problem = _build_problem(args)
    out = Path(args.out) if args.out else Path(f"{problem.kind}.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    benchmarks.save_problem(problem, out)
    print(f"snapshot: {out}")
    return 0


def _add_problem_flags(p: argparse.ArgumentParser, include_problem: bool = True) -> None:
    if include_problem:
        p.add_argument("--problem", choices=PROBLEM_KINDS, default="toy", help="benchmark problem")
        p.add_argument("--snapshot", default=None, help="load a problem snapshot (.npz) instead of generating")
    p.add_argument("--d", type=int, default=20, help="problem dimension")
    p.add_argument("--l", type=int, default=None, help="covariance rank for plgame (default d//2)")
    p.add_argument("--n", type=int, default=None, help="sample count (default 50*d plgame, 30*d matsense)")
    p.add_argument("--r", type=int, default=3, help="factor rank for matsense")
    p.add_argument("--mu-interval", type=float, default=0.1, dest="mu_interval",
                   help="lower edge of the plgame covariance diagonal interval")
    p.add_argument("--L-interval", type=float, default=1.0, dest="L_interval",
                   help="upper edge of the plgame covariance diagonal interval")
    p.add_argument("--project-coupling", action="store_true",
                   help="project the plgame coupling onto range(Q) (unlocks closed-form lower solutions)")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file; flags win")
    p.add_argument("--T", type=int, default=1000, help="iteration count")
    p.add_argument("--seed", type=int, default=0, help="seed for generation, init and output pick")
    p.add_argument("--base-lr", type=float, default=None, help="set all three step sizes at once")
    p.add_argument("--lr-x", type=float, default=None, dest="lr_x", help="upper step size")
    p.add_argument("--lr-y", type=float, default=None, dest="lr_y", help="lower step size")
    p.add_argument("--lr-v", type=float, default=None, dest="lr_v", help="auxiliary step size")
    p.add_argument("--fd-step", type=float, default=None, dest="fd_step", help="finite-difference probe step")
    p.add_argument("--v-radius", type=float, default=None, dest="v_radius", help="auxiliary ball radius")
    p.add_argument("--hvp-cap", type=float, default=None, dest="hvp_cap", help="norm cap on the estimated product")
    p.add_argument("--reg", choices=("auto", "zero", "box", "l1"), default="auto")
    p.add_argument("--box-lo", type=float, default=1.0, dest="box_lo")
    p.add_argument("--box-hi", type=float, default=2.0, dest="box_hi")
    p.add_argument("--l1-weight", type=float, default=1e-3, dest="l1_weight")
    p.add_argument("--with-gap", action="store_true", help="record the lower-level gap column")
    p.add_argument("--with-lyapunov", action="store_true", help="record the potential column")
    p.add_argument("--with-exact-grad-map", action="store_true",
                   help="record the exact gradient-mapping column")
    p.add_argument("--timing", action="store_true",
                   help="record wall_time_ns (makes traces non-reproducible)")
    p.add_argument("--out", default=None, help="output directory (default $BILEVELFD_OUT or ./out)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="bilevelfd",
        description="Single-loop bilevel solver with finite-difference hypergradient estimators",
    )
    parser.add_argument("--version", action="version", version=f"bilevelfd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve one problem instance and write trace/summary/figures")
    _add_problem_flags(p_run)
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", help="run a benchmark across seeds and aggregate")
    p_bench.add_argument("bench_problem", choices=("plgame", "matsense"))
    _add_problem_flags(p_bench, include_problem=False)
    _add_run_flags(p_bench)
    p_bench.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p_bench.add_argument("--seed-base", type=int, default=0, dest="seed_base", help="first seed")
    p_bench.set_defaults(func=cmd_bench, problem=None, snapshot=None)

    p_verify = sub.add_parser("verify", help="run the verification check suite")
    p_verify.add_argument("--level", choices=("quick", "full"), default="quick")
    p_verify.add_argument("--fd-step", type=float, default=None, dest="fd_step",
                          help="probe step for the consistency check")
    p_verify.set_defaults(func=cmd_verify)

    p_snap = sub.add_parser("snapshot", help="generate a problem and serialize it")
    _add_problem_flags(p_snap)
    p_snap.add_argument("--seed", type=int, default=0)
    p_snap.add_argument("--out", default=None, help="output .npz path")
    p_snap.set_defaults(func=cmd_snapshot)

    return parser, {"run": p_run, "bench": p_bench, "verify": p_verify, "snapshot": p_snap}


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            # Re-parse with the file values as defaults: explicit flags win.
            _apply_config_file(subparsers[args.command], args.config)
            args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
