"""Policy execution over the training horizon.

Each policy owns its model trajectory (same initialization, same probe and
shuffle streams) so that outcome differences are attributable to selection
behavior alone. A slot always charges the fleet's static carbon floor, even
when nobody trains.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Literal, Optional

import numpy as np

from .fleet import CarbonTrace, EnergyModel, Selection, carbon_total
from .utility import (
    GradientSnapshot,
    UtilityConfig,
    empirical_divergence,
    empirical_gradient_bound,
    utility,
)
from .lyapunov import (
    SOLVER_GAMMA,
    BoundConstants,
    ControlParams,
    PerSlotObjective,
    VirtualQueue,
    check_static_floor_feasible,
    queue_update,
)
from .solvers import (
    ORACLE_ENUM_MAX_CENTERS,
    SlotCandidate,
    enumerate_slot_candidates,
    solve_budget_greedy,
    solve_det_double_greedy,
    solve_exhaustive,
    solve_offline_oracle,
    solve_rand_double_greedy,
)
from .fedsim import (
    ModelState,
    TaskData,
    TrainConfig,
    full_participation_trajectory,
    global_loss,
    probe_snapshot,
    run_local_round,
    test_accuracy,
)

logger = logging.getLogger(__name__)

_STREAM_SOLVER = 15

PolicyKind = Literal[
    "cafe",
    "smu",
    "smn",
    "amu",
    "amn",
    "fixed_k_utility",
    "carbon_only_k",
    "offline_oracle",
]

_EXTREME_KINDS = {"fixed_k_utility", "carbon_only_k"}


@dataclass(frozen=True)
class PolicySpec:
    """Which policy to run, plus its solver (for cafe) or subset size k."""

    kind: PolicyKind
    solver: str = "rand_double_greedy"
    k: Optional[int] = None

    def __post_init__(self):
        if self.kind in _EXTREME_KINDS:
            if self.k is None:
                raise ValueError(f"policy {self.kind} requires k")
        elif self.k is not None:
            raise ValueError(f"policy {self.kind} does not take k")
        if self.kind == "cafe" and self.solver not in SOLVER_GAMMA:
            raise ValueError(
                f"unknown cafe solver {self.solver!r}; choose from {sorted(SOLVER_GAMMA)}"
            )

    @property
    def label(self) -> str:
        if self.kind == "cafe":
            return f"cafe-{self.solver}"
        if self.kind in _EXTREME_KINDS:
            return f"{self.kind}-{self.k}"
        return self.kind


@dataclass(frozen=True)
class SlotRecord:
    """One slot's decision and accounting."""

    t: int
    selection: Selection
    utility: float
    carbon_kg: float
    queue_after: float
    objective_value: float
    cumulative_carbon_kg: float
    train_loss: float
    test_accuracy: float


@dataclass
class RunResult:
    """SlotRecords plus the run-level artifacts the validators consume."""

    policy: str
    seed: int
    records: list[SlotRecord]
    snapshots: list[GradientSnapshot]
    final_model: ModelState
    bound_constants: Optional[BoundConstants] = None
    min_objective_seen: Optional[float] = None
    infeasible_slots: list[int] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def total_carbon(self) -> float:
        return self.records[-1].cumulative_carbon_kg if self.records else 0.0

    @property
    def avg_utility(self) -> float:
        return float(np.mean([r.utility for r in self.records]))


class _MinTrackingOracle:
    """Forwards to an oracle while remembering the smallest value it returned."""

    def __init__(self, oracle):
        self._oracle = oracle
        self.n_centers = oracle.n_centers
        self.min_seen = np.inf

    def __call__(self, selection: Selection) -> float:
        val = self._oracle(selection)
        if val < self.min_seen:
            self.min_seen = val
        return val


def _solve_p2(oracle, solver_id: str, seed: int, t: int):
    if solver_id == "exhaustive":
        return solve_exhaustive(oracle)
    if solver_id == "det_double_greedy":
        return solve_det_double_greedy(oracle)
    if solver_id == "rand_double_greedy":
        return solve_rand_double_greedy(oracle, (seed, t, _STREAM_SOLVER))
    raise ValueError(f"unknown solver {solver_id!r}")


def _run_slots(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    horizon: int,
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int,
    choose: Callable[[int, GradientSnapshot], tuple[Selection, float]],
    queue_after: Callable[[int, float], float] | None = None,
) -> tuple[list[SlotRecord], list[GradientSnapshot], ModelState]:
    """Shared probe/decide/train/account loop; choose() sets the policy."""
    if trace.horizon < horizon:
        raise ValueError(f"trace covers {trace.horizon} slots, need {horizon}")
    if trace.n_centers != task.n_centers or energy.n_centers != task.n_centers:
        raise ValueError("task, trace, and energy model disagree on center count")
    model = ModelState.zeros(task.n_classes, task.dim)
    records: list[SlotRecord] = []
    snapshots: list[GradientSnapshot] = []
    cumulative = 0.0
    for t in range(horizon):
        snapshot = probe_snapshot(model, task, train_cfg.probe_fraction, seed, t)
        snapshots.append(snapshot)
        selection, objective_value = choose(t, snapshot)
        slot_utility = utility(snapshot, selection, utility_cfg)
        carbon = carbon_total(energy, trace, t, selection)
        model = run_local_round(model, selection, task, train_cfg, (seed, t))
        cumulative += carbon
        q_after = queue_after(t, carbon) if queue_after is not None else 0.0
        records.append(
            SlotRecord(
                t=t,
                selection=selection,
                utility=slot_utility,
                carbon_kg=carbon,
                queue_after=q_after,
                objective_value=objective_value,
                cumulative_carbon_kg=cumulative,
                train_loss=global_loss(model, task),
                test_accuracy=test_accuracy(model, task),
            )
        )
    return records, snapshots, model


def _all_select_carbon_max(energy: EnergyModel, trace: CarbonTrace, horizon: int) -> float:
    full = Selection.full(trace.n_centers)
    return max(carbon_total(energy, trace, t, full) for t in range(horizon))


def _bound_constants(
    records: list[SlotRecord],
    snapshots: list[GradientSnapshot],
    energy: EnergyModel,
    trace: CarbonTrace,
    params: ControlParams,
    utility_cfg: UtilityConfig,
    gamma: float,
) -> BoundConstants:
    overshoots = [r.carbon_kg - params.per_slot_budget for r in records]
    b1 = 0.5 * max(o * o for o in overshoots)
    return BoundConstants(
        n_centers=trace.n_centers,
        G=empirical_gradient_bound(snapshots),
        delta_max=max(empirical_divergence(s) for s in snapshots),
        B1=b1,
        c_max=_all_select_carbon_max(energy, trace, params.T),
        gamma=gamma,
        b=utility_cfg.b,
        q0=params.q0,
        V=params.V,
        T=params.T,
        H=params.H,
    )


def run_cafe(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    params: ControlParams,
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    solver_id: str = "rand_double_greedy",
    seed: int = 0,
) -> RunResult:
    """Drift-plus-penalty controller: probe, solve the per-slot problem, train,
    then advance the carbon-deficit queue on realized emissions."""
    if solver_id not in SOLVER_GAMMA:
        raise ValueError(f"unknown solver {solver_id!r}")
    check_static_floor_feasible(params, energy, trace)
    queue = VirtualQueue.initial(params.q0)
    min_seen = np.inf

    def choose(t: int, snapshot: GradientSnapshot) -> tuple[Selection, float]:
        nonlocal min_seen
        oracle = _MinTrackingOracle(
            PerSlotObjective(snapshot, queue.q, t, params, energy, trace, utility_cfg)
        )
        result = _solve_p2(oracle, solver_id, seed, t)
        min_seen = min(min_seen, oracle.min_seen)
        return result.selection, result.value

    def advance(t: int, carbon: float) -> float:
        nonlocal queue
        queue = queue_update(queue, carbon, params)
        return queue.q

    records, snapshots, model = _run_slots(
        task, energy, trace, params.T, train_cfg, utility_cfg, seed, choose, advance
    )
    constants = _bound_constants(
        records, snapshots, energy, trace, params, utility_cfg, SOLVER_GAMMA[solver_id]
    )
    return RunResult(
        policy=f"cafe-{solver_id}",
        seed=seed,
        records=records,
        snapshots=snapshots,
        final_model=model,
        bound_constants=constants,
        min_objective_seen=float(min_seen),
        extras={"queue_history": queue.history},
    )


class _UtilityOracle:
    """Selection -> coreset utility, for the budgeted baseline solvers."""

    def __init__(self, snapshot: GradientSnapshot, cfg: UtilityConfig):
        self.snapshot = snapshot
        self.cfg = cfg
        self.n_centers = snapshot.n_centers

    def __call__(self, selection: Selection) -> float:
        return utility(self.snapshot, selection, self.cfg)


def _run_myopic(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    budget_total: float,
    horizon: int,
    objective: Literal["utility", "count"],
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int,
    adaptive: bool,
    label: str,
) -> RunResult:
    check_static_floor_feasible(
        ControlParams(V=1.0, H=budget_total, T=horizon), energy, trace
    )
    infeasible: list[int] = []
    spent = 0.0

    def choose(t: int, snapshot: GradientSnapshot) -> tuple[Selection, float]:
        slot_budget = (
            (budget_total - spent) / (horizon - t) if adaptive else budget_total / horizon
        )
        beta = trace.at(t)
        floor = float(beta @ energy.static_array())
        increments = beta * energy.active_array()
        result = solve_budget_greedy(
            _UtilityOracle(snapshot, utility_cfg),
            per_center_cost=increments.tolist(),
            budget=slot_budget,
            maximize=objective,
            static_floor=floor,
        )
        if not result.feasible:
            infeasible.append(t)
        value = result.value if objective == "utility" else float(result.selection.count)
        return result.selection, value

    def account(t: int, carbon: float) -> float:
        nonlocal spent
        spent += carbon
        return 0.0

    records, snapshots, model = _run_slots(
        task, energy, trace, horizon, train_cfg, utility_cfg, seed, choose, account
    )
    return RunResult(
        policy=label,
        seed=seed,
        records=records,
        snapshots=snapshots,
        final_model=model,
        infeasible_slots=infeasible,
    )


def run_static_myopic(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    budget_total: float,
    horizon: int,
    objective: Literal["utility", "count"],
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int = 0,
) -> RunResult:
    """Equal per-slot budget H/T; unspent budget is forfeited."""
    label = "smu" if objective == "utility" else "smn"
    return _run_myopic(
        task, energy, trace, budget_total, horizon, objective, train_cfg, utility_cfg,
        seed, adaptive=False, label=label,
    )


def run_adaptive_myopic(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    budget_total: float,
    horizon: int,
    objective: Literal["utility", "count"],
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int = 0,
) -> RunResult:
    """Remaining budget spread evenly over remaining slots: (H - spent) / (T - t)."""
    label = "amu" if objective == "utility" else "amn"
    return _run_myopic(
        task, energy, trace, budget_total, horizon, objective, train_cfg, utility_cfg,
        seed, adaptive=True, label=label,
    )


def _best_k_subset_utility(
    snapshot: GradientSnapshot, k: int, cfg: UtilityConfig
) -> tuple[Selection, float, str]:
    n = snapshot.n_centers
    if n <= ORACLE_ENUM_MAX_CENTERS:
        best_sel, best_val = None, -np.inf
        for combo in combinations(range(n), k):
            sel = Selection.from_indices(n, combo)
            val = utility(snapshot, sel, cfg)
            if val > best_val:
                best_sel, best_val = sel, val
        return best_sel, best_val, "exhaustive"
    chosen: list[int] = []
    current = Selection.empty(n)
    val = utility(snapshot, current, cfg)
    for _ in range(k):
        best_j, best_val = None, -np.inf
        for j in range(n):
            if j in chosen:
                continue
            cand_val = utility(snapshot, current.with_bit(j, True), cfg)
            if cand_val > best_val:
                best_j, best_val = j, cand_val
        chosen.append(best_j)
        current = current.with_bit(best_j, True)
        val = best_val
    return current, val, "greedy"


def run_extreme(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    kind: Literal["fixed_k_utility", "carbon_only_k"],
    k: int,
    horizon: int,
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int = 0,
) -> RunResult:
    """Fixed-cardinality comparison policies with no budget enforcement.

    fixed_k_utility picks the utility-maximizing k-subset each slot;
    carbon_only_k picks the k centers with the cheapest incremental carbon.
    """
    n = task.n_centers
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    mode_used = {"selection_mode": "exact"}

    def choose(t: int, snapshot: GradientSnapshot) -> tuple[Selection, float]:
        if kind == "fixed_k_utility":
            sel, val, mode = _best_k_subset_utility(snapshot, k, utility_cfg)
            mode_used["selection_mode"] = mode
            return sel, val
        increments = trace.at(t) * energy.active_array()
        order = np.lexsort((np.arange(n), increments))  # cheapest, lowest index first
        sel = Selection.from_indices(n, order[:k].tolist())
        return sel, -float(increments[order[:k]].sum())

    records, snapshots, model = _run_slots(
        task, energy, trace, horizon, train_cfg, utility_cfg, seed, choose
    )
    return RunResult(
        policy=f"{kind}-{k}",
        seed=seed,
        records=records,
        snapshots=snapshots,
        final_model=model,
        extras=mode_used,
    )


def run_offline_oracle(
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    budget_total: float,
    horizon: int,
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int = 0,
    grid: float | None = None,
) -> RunResult:
    """Hindsight benchmark: budget-optimal plan against the full-participation
    model sequence, then executed for reporting.

    Recorded utilities are the virtual (full-participation) ones that define
    the benchmark value; losses and accuracies come from actually training
    with the planned selections.
    """
    n = task.n_centers
    if n > ORACLE_ENUM_MAX_CENTERS:
        raise ValueError(
            f"offline oracle enumerates 2^N candidates; N={n} exceeds "
            f"{ORACLE_ENUM_MAX_CENTERS}"
        )
    trajectory = full_participation_trajectory(task, train_cfg, horizon, seed)
    decision_models = [ModelState.zeros(task.n_classes, task.dim)] + trajectory[:-1]
    virtual_snapshots = [
        probe_snapshot(decision_models[t], task, train_cfg.probe_fraction, seed, t)
        for t in range(horizon)
    ]

    def make_candidates(t: int) -> list[SlotCandidate]:
        snap = virtual_snapshots[t]

        def evaluate(sel: Selection) -> tuple[float, float]:
            return utility(snap, sel, utility_cfg), carbon_total(energy, trace, t, sel)

        return enumerate_slot_candidates(n, evaluate)

    plan = solve_offline_oracle(
        [make_candidates(t) for t in range(horizon)], budget_total, grid
    )

    def choose(t: int, snapshot: GradientSnapshot) -> tuple[Selection, float]:
        sel = plan.selections[t]
        return sel, utility(virtual_snapshots[t], sel, utility_cfg)

    records, _, model = _run_slots(
        task, energy, trace, horizon, train_cfg, utility_cfg, seed, choose
    )
    # Report the benchmark's own utilities, not the realized-trajectory ones.
    records = [
        SlotRecord(
            t=r.t,
            selection=r.selection,
            utility=r.objective_value,
            carbon_kg=r.carbon_kg,
            queue_after=r.queue_after,
            objective_value=r.objective_value,
            cumulative_carbon_kg=r.cumulative_carbon_kg,
            train_loss=r.train_loss,
            test_accuracy=r.test_accuracy,
        )
        for r in records
    ]
    return RunResult(
        policy="offline_oracle",
        seed=seed,
        records=records,
        snapshots=virtual_snapshots,
        final_model=model,
        extras={
            "opt_avg_utility": plan.total_utility / horizon,
            "plan_total_carbon": plan.total_carbon,
            "grid_slack": plan.grid_slack,
        },
    )


def run_policy(
    spec: PolicySpec,
    task: TaskData,
    energy: EnergyModel,
    trace: CarbonTrace,
    params: ControlParams,
    train_cfg: TrainConfig,
    utility_cfg: UtilityConfig,
    seed: int = 0,
) -> RunResult:
    """Dispatch one policy run; params supplies V/H/T/q0 where relevant."""
    if spec.kind == "cafe":
        return run_cafe(
            task, energy, trace, params, train_cfg, utility_cfg, spec.solver, seed
        )
    if spec.kind in ("smu", "smn"):
        objective = "utility" if spec.kind == "smu" else "count"
        return run_static_myopic(
            task, energy, trace, params.H, params.T, objective, train_cfg, utility_cfg, seed
        )
    if spec.kind in ("amu", "amn"):
        objective = "utility" if spec.kind == "amu" else "count"
        return run_adaptive_myopic(
            task, energy, trace, params.H, params.T, objective, train_cfg, utility_cfg, seed
        )
    if spec.kind in _EXTREME_KINDS:
        return run_extreme(
            task, energy, trace, spec.kind, spec.k, params.T, train_cfg, utility_cfg, seed
        )
    if spec.kind == "offline_oracle":
        return run_offline_oracle(
            task, energy, trace, params.H, params.T, train_cfg, utility_cfg, seed
        )
    raise ValueError(f"unknown policy kind {spec.kind!r}")
