"""Experiment harness: config ingestion, run orchestration, metrics files,
and bound-validation reporting.

Every output file is a pure function of (config, seeds): floats are written
with repr (shortest round-trip), rows follow declared policy/seed order, and
files land via write-then-rename.
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .fleet import CarbonTrace, EnergyModel, FleetConfig
from .utility import UtilityConfig
from .lyapunov import BoundConstants, BoundReport, ControlParams, build_bound_report
from .solvers import ORACLE_ENUM_MAX_CENTERS
from .fedsim import SyntheticTask, TaskData, TrainConfig, generate_task
from .controller import PolicySpec, RunResult, SlotRecord, run_offline_oracle, run_policy
from .traces import load_trace, synth_trace

SLOT_COLUMNS = [
    "policy",
    "seed",
    "slot",
    "selection_bits",
    "utility",
    "carbon_kg",
    "cum_carbon_kg",
    "queue",
    "objective",
    "train_loss",
    "test_acc",
]
SUMMARY_COLUMNS = [
    "policy",
    "avg_utility",
    "avg_carbon_kg",
    "total_carbon_kg",
    "final_acc",
    "thm1_pass",
    "thm1_rhs_main",
    "thm1_rhs_appendix",
]
FINAL_ACC_WINDOW = 20


class ConfigError(ValueError):
    """The experiment config violated its schema or parameter domains."""


def default_config() -> dict:
    """Desk-scale default scenario: ten small centers, two-day horizon."""
    return {
        "fleet": {"n_centers": 10},
        "energy": {"static_kwh": 0.04, "active_kwh": 0.76},
        "trace": {"source": "synthetic", "profile": "diurnal", "seed": 7},
        "task": {
            "n_classes": 5,
            "dim": 8,
            "noise_scale": 1.0,
            "samples_per_center": 200,
            "dirichlet_alpha": 0.8,
            "seed": 1,
            "test_samples": 2000,
        },
        "policies": [
            {"kind": "cafe", "solver": "rand_double_greedy"},
            {"kind": "smu"},
            {"kind": "smn"},
            {"kind": "amu"},
            {"kind": "amn"},
        ],
        "control": {"V": 0.5, "budget_kg": 48.0, "horizon": 48, "q0": 10.0},
        "train": {
            "local_epochs": 2,
            "learning_rate": 0.1,
            "batch_size": 32,
            "probe_fraction": 0.05,
        },
        "utility": {"gradient_norm_cap": 10.0, "b": None},
        "compute_oracle": False,
        "oracle_grid": None,
        "seeds": [0, 1, 2],
        "output_dir": "runs/default",
    }


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _as_center_list(value, n: int, name: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    _require(
        isinstance(value, list) and len(value) == n,
        f"{name} must be a number or a list of {n} numbers",
    )
    return [float(v) for v in value]


@dataclass
class ExperimentConfig:
    """Fully validated experiment description."""

    fleet: FleetConfig
    energy: EnergyModel
    trace: CarbonTrace
    task: SyntheticTask
    policies: list[PolicySpec]
    control: ControlParams
    train: TrainConfig
    utility: UtilityConfig
    seeds: list[int]
    output_dir: str
    compute_oracle: bool = False
    oracle_grid: float | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str = ".") -> "ExperimentConfig":
        try:
            return cls._parse(raw, base_dir)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def _parse(cls, raw: dict, base_dir: str) -> "ExperimentConfig":
        _require(isinstance(raw, dict), "config must be a JSON object")
        known = {
            "fleet", "energy", "trace", "task", "policies", "control", "train",
            "utility", "compute_oracle", "oracle_grid", "seeds", "output_dir",
        }
        unknown = set(raw) - known
        _require(not unknown, f"unknown config keys: {sorted(unknown)}")

        fleet_raw = raw.get("fleet", {})
        n = int(fleet_raw.get("n_centers", 0))
        _require(n >= 1, "fleet.n_centers must be >= 1")
        fleet = FleetConfig(
            n_centers=n, center_labels=tuple(fleet_raw.get("center_labels", ()))
        )

        energy_raw = raw.get("energy", {})
        energy = EnergyModel(
            static_kwh=tuple(_as_center_list(energy_raw.get("static_kwh", 40.0), n, "energy.static_kwh")),
            active_kwh=tuple(_as_center_list(energy_raw.get("active_kwh", 760.0), n, "energy.active_kwh")),
        )

        control_raw = raw.get("control", {})
        control = ControlParams(
            V=float(control_raw.get("V", 0.5)),
            H=float(control_raw.get("budget_kg", 0.0)),
            T=int(control_raw.get("horizon", 0)),
            q0=float(control_raw.get("q0", 0.0)),
        )

        trace_raw = raw.get("trace", {})
        source = trace_raw.get("source", "synthetic")
        if source == "file":
            path = trace_raw.get("path")
            _require(bool(path), "trace.path is required when trace.source is 'file'")
            full = Path(base_dir) / path
            _require(full.exists(), f"trace file {full} does not exist")
            trace = load_trace(str(full))
        elif source == "synthetic":
            trace = synth_trace(
                n_centers=n,
                horizon=int(trace_raw.get("horizon", control.T)),
                profile=trace_raw.get("profile", "diurnal"),
                seed=int(trace_raw.get("seed", 0)),
            )
        else:
            raise ConfigError(f"trace.source must be 'synthetic' or 'file', got {source!r}")
        _require(
            trace.n_centers == n,
            f"trace covers {trace.n_centers} centers, fleet has {n}",
        )
        _require(
            trace.horizon >= control.T,
            f"trace covers {trace.horizon} slots, horizon needs {control.T}",
        )

        task_raw = dict(raw.get("task", {}))
        task_raw.setdefault("n_centers", n)
        _require(
            int(task_raw["n_centers"]) == n,
            "task.n_centers must match fleet.n_centers",
        )
        task = SyntheticTask(**task_raw)

        train = TrainConfig(**raw.get("train", {}))

        utility_raw = raw.get("utility", {})
        utility_cfg = UtilityConfig.for_fleet(
            n,
            gradient_norm_cap=float(utility_raw.get("gradient_norm_cap", 10.0)),
            b=utility_raw.get("b"),
        )

        policies_raw = raw.get("policies", [])
        _require(
            isinstance(policies_raw, list) and policies_raw,
            "policies must be a non-empty list",
        )
        policies = []
        for p in policies_raw:
            spec = PolicySpec(
                kind=p["kind"],
                solver=p.get("solver", "rand_double_greedy"),
                k=p.get("k"),
            )
            if spec.kind in ("fixed_k_utility", "carbon_only_k"):
                _require(1 <= spec.k <= n, f"policy {spec.kind}: k must lie in [1, {n}]")
            policies.append(spec)
        labels = [p.label for p in policies]
        _require(len(labels) == len(set(labels)), f"duplicate policy labels: {labels}")

        seeds = raw.get("seeds", [0])
        _require(
            isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds),
            "seeds must be a non-empty list of non-negative integers",
        )
        _require(len(set(seeds)) == len(seeds), "seeds must be distinct")

        compute_oracle = bool(raw.get("compute_oracle", False))
        if compute_oracle:
            _require(
                n <= ORACLE_ENUM_MAX_CENTERS,
                f"compute_oracle needs n_centers <= {ORACLE_ENUM_MAX_CENTERS}",
            )
        oracle_grid = raw.get("oracle_grid")
        if oracle_grid is not None:
            oracle_grid = float(oracle_grid)
            _require(oracle_grid > 0, "oracle_grid must be positive")

        output_dir = raw.get("output_dir", "runs/experiment")
        return cls(
            fleet=fleet,
            energy=energy,
            trace=trace,
            task=task,
            policies=policies,
            control=control,
            train=train,
            utility=utility_cfg,
            seeds=list(seeds),
            output_dir=str(output_dir),
            compute_oracle=compute_oracle,
            oracle_grid=oracle_grid,
            raw=raw,
        )

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base_dir=str(Path(path).parent))


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _slot_row(policy: str, seed: int, r: SlotRecord) -> list[str]:
    return [
        policy,
        str(seed),
        str(r.t),
        r.selection.bitstring(),
        repr(r.utility),
        repr(r.carbon_kg),
        repr(r.cumulative_carbon_kg),
        repr(r.queue_after),
        repr(r.objective_value),
        repr(r.train_loss),
        repr(r.test_accuracy),
    ]


def final_accuracy(test_accs: Sequence[float], window: int = FINAL_ACC_WINDOW) -> float:
    """Mean test accuracy over the last `window` slots (or all, if fewer)."""
    tail = list(test_accs)[-window:]
    return float(np.mean(tail))


@dataclass
class MetricsTable:
    """All slot rows of an experiment plus per-policy summaries."""

    rows: list[tuple[str, int, SlotRecord]]
    reports: dict[tuple[str, int], BoundReport]
    errors: list[tuple[str, int, str]]
    policy_order: list[str]
    seeds: list[int]

    def slot_csv_text(self) -> str:
        lines = [",".join(SLOT_COLUMNS)]
        lines += [",".join(_slot_row(p, s, r)) for p, s, r in self.rows]
        return "\n".join(lines) + "\n"

    def run_series(self, policy: str, seed: int) -> list[SlotRecord]:
        return [r for p, s, r in self.rows if p == policy and s == seed]

    def summary_rows(self) -> list[dict[str, str]]:
        out = []
        for policy in self.policy_order:
            per_seed = [
                series
                for seed in self.seeds
                if (series := self.run_series(policy, seed))
            ]
            if not per_seed:
                continue
            avg_utility = float(np.mean([np.mean([r.utility for r in s]) for s in per_seed]))
            avg_carbon = float(np.mean([np.mean([r.carbon_kg for r in s]) for s in per_seed]))
            total_carbon = float(np.mean([s[-1].cumulative_carbon_kg for s in per_seed]))
            final_acc = float(
                np.mean([final_accuracy([r.test_accuracy for r in s]) for s in per_seed])
            )
            reports = [
                self.reports[(policy, seed)]
                for seed in self.seeds
                if (policy, seed) in self.reports
            ]
            if reports:
                thm1_pass = str(all(rep.thm1_pass for rep in reports))
                rhs_main = repr(float(np.mean([rep.thm1_rhs_main for rep in reports])))
                rhs_app = repr(float(np.mean([rep.thm1_rhs_appendix for rep in reports])))
            else:
                thm1_pass = rhs_main = rhs_app = ""
            out.append(
                {
                    "policy": policy,
                    "avg_utility": repr(avg_utility),
                    "avg_carbon_kg": repr(avg_carbon),
                    "total_carbon_kg": repr(total_carbon),
                    "final_acc": repr(final_acc),
                    "thm1_pass": thm1_pass,
                    "thm1_rhs_main": rhs_main,
                    "thm1_rhs_appendix": rhs_app,
                }
            )
        return out

    def summary_csv_text(self) -> str:
        lines = [",".join(SUMMARY_COLUMNS)]
        for row in self.summary_rows():
            lines.append(",".join(row[col] for col in SUMMARY_COLUMNS))
        return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> MetricsTable:
    """Execute every (policy, seed) cell and write all artifacts.

    A failing cell is recorded in errors.csv and skipped; remaining cells
    still run. Bound reports and their constants are written per cafe run,
    and an offline-oracle artifact per seed when compute_oracle is set.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    task_data = generate_task(cfg.task)

    oracle_values: dict[int, float] = {}
    if cfg.compute_oracle:
        for seed in cfg.seeds:
            oracle_run = run_offline_oracle(
                task_data, cfg.energy, cfg.trace, cfg.control.H, cfg.control.T,
                cfg.train, cfg.utility, seed=seed, grid=cfg.oracle_grid,
            )
            oracle_values[seed] = oracle_run.extras["opt_avg_utility"]
            _write_atomic(
                out_dir / f"oracle_{seed}.json",
                json.dumps(
                    {
                        "opt_avg_utility": oracle_run.extras["opt_avg_utility"],
                        "plan_total_carbon": oracle_run.extras["plan_total_carbon"],
                        "grid_slack": oracle_run.extras["grid_slack"],
                    },
                    sort_keys=True,
                    indent=2,
                )
                + "\n",
            )

    rows: list[tuple[str, int, SlotRecord]] = []
    reports: dict[tuple[str, int], BoundReport] = {}
    errors: list[tuple[str, int, str]] = []
    for spec in cfg.policies:
        for seed in cfg.seeds:
            try:
                result = run_policy(
                    spec, task_data, cfg.energy, cfg.trace, cfg.control,
                    cfg.train, cfg.utility, seed=seed,
                )
            except Exception as exc:  # cell isolation: other cells proceed
                errors.append((spec.label, seed, f"{type(exc).__name__}: {exc}"))
                continue
            for record in result.records:
                rows.append((result.policy, seed, record))
            if result.bound_constants is not None:
                report = build_bound_report(
                    [r.carbon_kg for r in result.records],
                    [r.utility for r in result.records],
                    result.bound_constants,
                    opt_value=oracle_values.get(seed),
                    min_objective_seen=result.min_objective_seen,
                )
                reports[(result.policy, seed)] = report
                _write_atomic(
                    out_dir / f"bounds_{result.policy}_{seed}.txt", report.to_text()
                )
                _write_atomic(
                    out_dir / f"constants_{result.policy}_{seed}.json",
                    json.dumps(
                        {
                            "constants": result.bound_constants.as_dict(),
                            "min_objective_seen": result.min_objective_seen,
                        },
                        sort_keys=True,
                        indent=2,
                    )
                    + "\n",
                )

    table = MetricsTable(
        rows=rows,
        reports=reports,
        errors=errors,
        policy_order=[p.label for p in cfg.policies],
        seeds=list(cfg.seeds),
    )
    _write_atomic(
        out_dir / "config_echo.json",
        json.dumps(cfg.raw, sort_keys=True, indent=2) + "\n",
    )
    _write_atomic(out_dir / "slots.csv", table.slot_csv_text())
    _write_atomic(out_dir / "summary.csv", table.summary_csv_text())
    if errors:
        lines = ["policy,seed,error"]
        lines += [f"{p},{s},{msg.replace(',', ';')}" for p, s, msg in errors]
        _write_atomic(out_dir / "errors.csv", "\n".join(lines) + "\n")
    return table


def _read_slot_rows(path: Path) -> list[dict[str, str]]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    if header != SLOT_COLUMNS:
        raise ConfigError(f"{path}: unexpected slot CSV header {header}")
    return [dict(zip(header, line.split(","))) for line in lines[1:]]


def validate_bounds(run_dir: str) -> dict[tuple[str, int], BoundReport]:
    """Re-derive bound reports from a finished run's artifacts.

    Reads slots.csv plus each cafe run's constants file; picks up
    oracle_{seed}.json when present, otherwise the utility bound is skipped.
    """
    run_path = Path(run_dir)
    slots_file = run_path / "slots.csv"
    if not slots_file.exists():
        raise ConfigError(f"{slots_file} not found; not a run directory?")
    slot_rows = _read_slot_rows(slots_file)
    reports: dict[tuple[str, int], BoundReport] = {}
    for const_file in sorted(run_path.glob("constants_*.json")):
        stem = const_file.stem[len("constants_") :]
        policy, _, seed_str = stem.rpartition("_")
        seed = int(seed_str)
        payload = json.loads(const_file.read_text())
        cdict = payload["constants"]
        constants = BoundConstants(
            n_centers=int(cdict["n_centers"]),
            G=cdict["G"],
            delta_max=cdict["delta_max"],
            B1=cdict["B1"],
            c_max=cdict["c_max"],
            gamma=cdict["gamma"],
            b=cdict["b"],
            q0=cdict["q0"],
            V=cdict["V"],
            T=int(cdict["T"]),
            H=cdict["H"],
        )
        series = [
            row
            for row in slot_rows
            if row["policy"] == policy and int(row["seed"]) == seed
        ]
        if not series:
            raise ConfigError(f"{run_dir}: no slot rows for ({policy}, {seed})")
        series.sort(key=lambda row: int(row["slot"]))
        opt_value = None
        oracle_file = run_path / f"oracle_{seed}.json"
        if oracle_file.exists():
            opt_value = json.loads(oracle_file.read_text())["opt_avg_utility"]
        reports[(policy, seed)] = build_bound_report(
            [float(row["carbon_kg"]) for row in series],
            [float(row["utility"]) for row in series],
            constants,
            opt_value=opt_value,
            min_objective_seen=payload.get("min_objective_seen"),
        )
    return reports


# Friendly sweep-parameter names -> config paths.
SWEEP_KEYS = {
    "V": ("control", "V"),
    "q0": ("control", "q0"),
    "H": ("control", "budget_kg"),
    "epsilon": ("train", "probe_fraction"),
    "alpha": ("task", "dirichlet_alpha"),
}


def _set_path(cfg: dict, path: tuple[str, ...], value) -> None:
    node = cfg
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value


def _sweep_cell(args: tuple[dict, str]) -> tuple[str, str]:
    raw, cell_dir = args
    try:
        run_experiment(ExperimentConfig.from_dict(raw))
        return cell_dir, "ok"
    except Exception as exc:
        return cell_dir, f"{type(exc).__name__}: {exc}"


def run_sweep(
    base_raw: dict, grid: dict[str, list], out_dir: str, workers: int = 1
) -> list[tuple[str, dict, str]]:
    """Run the cartesian product of grid values over the base config.

    Grid keys are the friendly names in SWEEP_KEYS or dotted config paths.
    Each cell writes a full experiment directory under out_dir/cells.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    paths: list[tuple[str, tuple[str, ...]]] = []
    for key in sorted(grid):
        if key in SWEEP_KEYS:
            paths.append((key, SWEEP_KEYS[key]))
        elif "." in key:
            paths.append((key, tuple(key.split("."))))
        else:
            raise ConfigError(
                f"unknown sweep key {key!r}; use one of {sorted(SWEEP_KEYS)} or a dotted path"
            )
        values = grid[key]
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep key {key!r} needs a non-empty list of values")

    out_path = Path(out_dir)
    (out_path / "cells").mkdir(parents=True, exist_ok=True)
    jobs = []
    cells_meta = []
    for combo in itertools.product(*(grid[key] for key, _ in paths)):
        overrides = {key: value for (key, _), value in zip(paths, combo)}
        cell_name = "_".join(f"{key}={value}" for key, value in overrides.items())
        raw = json.loads(json.dumps(base_raw))  # deep copy
        for (key, path), value in zip(paths, combo):
            _set_path(raw, path, value)
        cell_dir = str(out_path / "cells" / cell_name)
        _set_path(raw, ("output_dir",), cell_dir)
        jobs.append((raw, cell_name))
        cells_meta.append((cell_name, overrides))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = dict(pool.map(_sweep_cell, jobs))
    else:
        statuses = dict(map(_sweep_cell, jobs))

    results = [(name, overrides, statuses[name]) for name, overrides in cells_meta]
    lines = ["cell,overrides,status"]
    for name, overrides, status in results:
        over = json.dumps(overrides, sort_keys=True).replace(",", ";")
        lines.append(f"{name},{over},{status}")
    _write_atomic(out_path / "sweep_index.csv", "\n".join(lines) + "\n")
    return results
