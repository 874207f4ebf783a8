"""Command-line surface: run, sweep, validate, synth-trace, solve.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 bound-validation
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .fleet import EnergyModel, Selection
from .utility import GradientSnapshot, UtilityConfig
from .harness import (
    ConfigError,
    ExperimentConfig,
    default_config,
    run_experiment,
    run_sweep,
    validate_bounds,
)
from .solvers import solve_det_double_greedy, solve_exhaustive, solve_rand_double_greedy
from .traces import save_trace, synth_trace

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_BOUNDS = 3


def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value_text = item.partition("=")
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text  # bare strings are allowed unquoted
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return raw


def _load_raw_config(path: str | None, overrides: list[str]) -> dict:
    if path is None:
        raw = default_config()
    else:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return _apply_overrides(raw, overrides)


def _cmd_run(args: argparse.Namespace) -> int:
    raw = _load_raw_config(args.config, args.set or [])
    if args.out:
        raw["output_dir"] = args.out
    cfg = ExperimentConfig.from_dict(raw)
    table = run_experiment(cfg)
    for row in table.summary_rows():
        print(
            f"{row['policy']}: final_acc={row['final_acc']} "
            f"total_carbon_kg={row['total_carbon_kg']}"
        )
    if table.errors:
        for policy, seed, msg in table.errors:
            print(f"error in cell ({policy}, {seed}): {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {cfg.output_dir}")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    raw = _load_raw_config(args.config, args.set or [])
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise ConfigError(f"grid file {args.grid} does not exist")
    try:
        grid = json.loads(grid_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.grid}: invalid JSON ({exc})") from exc
    results = run_sweep(raw, grid, args.out, workers=args.workers)
    failures = [(name, status) for name, _, status in results if status != "ok"]
    for name, _, status in results:
        print(f"{name}: {status}")
    if failures:
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    reports = validate_bounds(args.run_dir)
    if not reports:
        print("no cafe runs found; nothing to validate", file=sys.stderr)
        return EXIT_CONFIG
    failed = False
    for (policy, seed), report in sorted(reports.items()):
        print(f"== {policy} seed={seed} ==")
        print(report.to_text(), end="")
        if not report.thm1_pass:
            failed = True
        if report.thm2_pass is False:
            failed = True
    return EXIT_BOUNDS if failed else EXIT_OK


def _cmd_synth_trace(args: argparse.Namespace) -> int:
    trace = synth_trace(
        n_centers=args.centers,
        horizon=args.horizon,
        profile=args.profile,
        seed=args.seed,
    )
    save_trace(trace, args.out)
    print(f"wrote {args.out} ({trace.horizon} slots x {trace.n_centers} centers)")
    return EXIT_OK


def _cmd_solve(args: argparse.Namespace) -> int:
    """One-shot per-slot solve from a JSON problem file, for debugging."""
    path = Path(args.input)
    if not path.exists():
        raise ConfigError(f"input file {args.input} does not exist")
    try:
        problem = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.input}: invalid JSON ({exc})") from exc
    try:
        gradients = np.asarray(problem["gradients"], dtype=float)
        intensities = np.asarray(problem["intensities"], dtype=float)
    except KeyError as exc:
        raise ConfigError(f"missing problem key {exc}") from exc
    n = gradients.shape[0]
    if intensities.shape != (n,):
        raise ConfigError(f"intensities must have length {n}")
    snapshot = GradientSnapshot(gradients=gradients)
    cap = float(problem.get("gradient_norm_cap", max(10.0, snapshot.max_norm)))
    cfg = UtilityConfig.for_fleet(n, gradient_norm_cap=cap, b=problem.get("b"))
    static = problem.get("static_kwh", 0.0)
    active = problem.get("active_kwh", 1.0)
    energy = EnergyModel(
        static_kwh=tuple(static if isinstance(static, list) else [static] * n),
        active_kwh=tuple(active if isinstance(active, list) else [active] * n),
    )
    q = float(problem.get("q", 0.0))
    v = float(problem.get("V", 1.0))
    floor = float(intensities @ energy.static_array())
    increments = intensities * energy.active_array()

    class _Oracle:
        n_centers = n

        def __call__(self, sel: Selection) -> float:
            from .utility import utility

            carbon = floor + float(increments[sel.as_array()].sum())
            return v * utility(snapshot, sel, cfg) - q * carbon

    oracle = _Oracle()
    solver = args.solver
    if solver == "exhaustive":
        result = solve_exhaustive(oracle)
    elif solver == "det_double_greedy":
        result = solve_det_double_greedy(oracle)
    elif solver == "rand_double_greedy":
        result = solve_rand_double_greedy(oracle, args.seed)
    else:
        raise ConfigError(f"unknown solver {solver!r}")
    print(
        json.dumps(
            {
                "solver": result.solver_id,
                "selection_bits": result.selection.bitstring(),
                "members": list(result.selection.members),
                "value": result.value,
                "evaluations": result.evaluations,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbonfl",
        description="Carbon-aware data-center selection experiments for federated learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", help="config JSON (defaults to the built-in desk-scale scenario)")
    p_run.add_argument("--out", help="override output directory")
    p_run.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config value by dotted path, e.g. control.V=2.0",
    )
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid sweep over V/q0/H/epsilon/alpha")
    p_sweep.add_argument("--config", help="base config JSON")
    p_sweep.add_argument("--grid", required=True, help="JSON file mapping sweep keys to value lists")
    p_sweep.add_argument("--out", required=True, help="sweep output directory")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_val = sub.add_parser("validate", help="re-check theorem bounds on run artifacts")
    p_val.add_argument("run_dir")
    p_val.set_defaults(func=_cmd_validate)

    p_synth = sub.add_parser("synth-trace", help="emit a synthetic carbon-intensity CSV")
    p_synth.add_argument("--centers", type=int, required=True)
    p_synth.add_argument("--horizon", type=int, required=True)
    p_synth.add_argument(
        "--profile", default="diurnal", choices=["constant", "diurnal", "random_walk"]
    )
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth_trace)

    p_solve = sub.add_parser("solve", help="solve one per-slot problem from a JSON file")
    p_solve.add_argument("--input", required=True)
    p_solve.add_argument(
        "--solver",
        default="det_double_greedy",
        choices=["exhaustive", "det_double_greedy", "rand_double_greedy"],
    )
    p_solve.add_argument("--seed", type=int, default=0)
    p_solve.set_defaults(func=_cmd_solve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
