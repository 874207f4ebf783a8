"""Per-slot selection solvers and the offline planning oracle.

All per-slot solvers maximize an objective oracle g over the 2^N binary
selections. An oracle is any callable mapping a Selection to a float and
exposing n_centers; evaluations must be deterministic and side-effect free
within a slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Protocol, Sequence

import numpy as np

from .fleet import Selection

EXHAUSTIVE_MAX_CENTERS = 24
ORACLE_ENUM_MAX_CENTERS = 12


class ObjectiveOracle(Protocol):
    n_centers: int

    def __call__(self, selection: Selection) -> float: ...


class InfeasiblePlanError(RuntimeError):
    """Raised when no candidate sequence fits inside the carbon budget."""


SolverId = Literal["exhaustive", "det_double_greedy", "rand_double_greedy", "budget_greedy"]


@dataclass(frozen=True)
class SolveResult:
    """Outcome of one per-slot solve."""

    selection: Selection
    value: float
    evaluations: int
    solver_id: SolverId
    feasible: bool = True


@dataclass(frozen=True)
class OfflinePlan:
    """Budget-feasible selection sequence maximizing total utility."""

    selections: tuple[Selection, ...]
    total_utility: float
    total_carbon: float
    grid_slack: float


class _CountingOracle:
    """Wraps an oracle to count evaluations; solvers report the count."""

    def __init__(self, oracle):
        self._oracle = oracle
        self.n_centers = oracle.n_centers
        self.calls = 0

    def __call__(self, selection: Selection) -> float:
        self.calls += 1
        return float(self._oracle(selection))


def solve_exhaustive(oracle: ObjectiveOracle) -> SolveResult:
    """Evaluate all 2^N selections (the empty set included) and return the maximizer.

    Ties break toward the lexicographically smallest bit vector, which makes
    parallel enumeration mergeable by plain max.
    """
    n = oracle.n_centers
    if n > EXHAUSTIVE_MAX_CENTERS:
        raise ValueError(
            f"exhaustive search over {n} centers would need 2^{n} evaluations; "
            f"limit is {EXHAUSTIVE_MAX_CENTERS}"
        )
    counting = _CountingOracle(oracle)
    best_sel = None
    best_val = -math.inf
    for mask in range(1 << n):
        sel = Selection(tuple((mask >> i) & 1 == 1 for i in range(n)))
        val = counting(sel)
        if val > best_val:
            best_sel, best_val = sel, val
    return SolveResult(
        selection=best_sel, value=best_val, evaluations=counting.calls, solver_id="exhaustive"
    )


def solve_det_double_greedy(oracle: ObjectiveOracle) -> SolveResult:
    """One-pass double greedy for unconstrained non-monotone submodular maximization.

    Sweeps the centers in index order keeping a growing lower solution and a
    shrinking upper solution; at each center the larger of the two marginal
    moves wins. Guarantees value >= optimum / 3 when g is non-negative
    submodular, with at most 2N + 2 oracle evaluations.
    """
    counting = _CountingOracle(oracle)
    n = counting.n_centers
    lower = Selection.empty(n)
    upper = Selection.full(n)
    g_lower = counting(lower)
    g_upper = counting(upper)
    for j in range(n):
        gain_add = counting(lower.with_bit(j, True)) - g_lower
        gain_drop = counting(upper.with_bit(j, False)) - g_upper
        if gain_add >= gain_drop:
            lower = lower.with_bit(j, True)
            g_lower += gain_add
        else:
            upper = upper.with_bit(j, False)
            g_upper += gain_drop
    assert lower.bits == upper.bits, "double greedy sweep must close the gap"
    return SolveResult(
        selection=lower,
        value=g_lower,
        evaluations=counting.calls,
        solver_id="det_double_greedy",
    )


def solve_rand_double_greedy(oracle: ObjectiveOracle, rng_seed) -> SolveResult:
    """Randomized double greedy: accept each center with probability u+/(u+ + v+).

    Achieves expected value >= optimum / 2 on non-negative submodular
    objectives. When both clipped marginals are zero the center is accepted,
    matching the deterministic rule's tie branch.
    """
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    counting = _CountingOracle(oracle)
    n = counting.n_centers
    lower = Selection.empty(n)
    upper = Selection.full(n)
    g_lower = counting(lower)
    g_upper = counting(upper)
    for j in range(n):
        gain_add = counting(lower.with_bit(j, True)) - g_lower
        gain_drop = counting(upper.with_bit(j, False)) - g_upper
        # For submodular g the two marginals cannot both be negative; allow
        # floating slack proportional to the values involved.
        tol = 1e-9 * max(1.0, abs(g_lower), abs(g_upper))
        assert gain_add + gain_drop >= -tol, (
            f"u_j + v_j = {gain_add + gain_drop} < 0 at center {j}; objective is "
            "not submodular"
        )
        u_plus = max(gain_add, 0.0)
        v_plus = max(gain_drop, 0.0)
        if u_plus + v_plus == 0.0:
            accept = True
        else:
            accept = rng.random() < u_plus / (u_plus + v_plus)
        if accept:
            lower = lower.with_bit(j, True)
            g_lower += gain_add
        else:
            upper = upper.with_bit(j, False)
            g_upper += gain_drop
    assert lower.bits == upper.bits
    return SolveResult(
        selection=lower,
        value=g_lower,
        evaluations=counting.calls,
        solver_id="rand_double_greedy",
    )


def solve_budget_greedy(
    oracle: ObjectiveOracle,
    per_center_cost: Sequence[float],
    budget: float,
    maximize: Literal["utility", "count"] = "utility",
    static_floor: float = 0.0,
) -> SolveResult:
    """Greedy selection under a per-slot carbon budget, for the myopic baselines.

    The static floor is charged whether or not anyone trains and is deducted
    from the budget up front. Utility mode adds the feasible center with the
    best marginal-gain-to-cost ratio while a strict improvement exists; count
    mode packs the cheapest centers until the budget runs out. Ties break on
    the lowest center index.
    """
    costs = [float(c) for c in per_center_cost]
    if any(c < 0 for c in costs):
        raise ValueError("per-center costs must be non-negative")
    counting = _CountingOracle(oracle)
    n = counting.n_centers
    if len(costs) != n:
        raise ValueError(f"expected {n} costs, got {len(costs)}")
    remaining = budget - static_floor
    empty = Selection.empty(n)
    if remaining < 0:
        return SolveResult(
            selection=empty,
            value=counting(empty),
            evaluations=counting.calls,
            solver_id="budget_greedy",
            feasible=False,
        )

    current = empty
    g_current = counting(current)
    chosen: set[int] = set()
    while True:
        best_j = None
        best_key = None
        for j in range(n):
            if j in chosen or costs[j] > remaining:
                continue
            if maximize == "count":
                key = (-costs[j], -j)  # cheapest first, then lowest index
            else:
                gain = counting(current.with_bit(j, True)) - g_current
                if gain <= 0.0:
                    continue
                ratio = math.inf if costs[j] == 0.0 else gain / costs[j]
                key = (ratio, -j)
            if best_key is None or key > best_key:
                best_key = key
                best_j = j
        if best_j is None:
            break
        chosen.add(best_j)
        current = current.with_bit(best_j, True)
        g_current = counting(current)
        remaining -= costs[best_j]
    return SolveResult(
        selection=current,
        value=g_current,
        evaluations=counting.calls,
        solver_id="budget_greedy",
    )


@dataclass(frozen=True)
class SlotCandidate:
    """One admissible selection for one slot, with its utility and carbon."""

    selection: Selection
    utility: float
    carbon: float


def enumerate_slot_candidates(
    n_centers: int, evaluate: Callable[[Selection], tuple[float, float]]
) -> list[SlotCandidate]:
    """All 2^N candidates for one slot; evaluate returns (utility, carbon)."""
    if n_centers > ORACLE_ENUM_MAX_CENTERS:
        raise ValueError(
            f"candidate enumeration limited to {ORACLE_ENUM_MAX_CENTERS} centers, "
            f"got {n_centers}"
        )
    out = []
    for mask in range(1 << n_centers):
        sel = Selection(tuple((mask >> i) & 1 == 1 for i in range(n_centers)))
        u, c = evaluate(sel)
        out.append(SlotCandidate(selection=sel, utility=float(u), carbon=float(c)))
    return out


def _grid_units(carbon: float, grid: float) -> int:
    # Round carbon up to the grid so a feasible plan never exceeds the true
    # budget; snap near-exact multiples to avoid float noise inflating them.
    ratio = carbon / grid
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, abs(ratio)):
        return int(nearest)
    return int(math.ceil(ratio))


def _pareto_front(candidates: Sequence[SlotCandidate], grid: float) -> list[tuple[int, int]]:
    """Indices of candidates not dominated in (grid carbon, utility), cheap first."""
    units = [_grid_units(c.carbon, grid) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (units[i], -candidates[i].utility))
    front: list[tuple[int, int]] = []
    best_u = -math.inf
    for i in order:
        if candidates[i].utility > best_u:
            front.append((i, units[i]))
            best_u = candidates[i].utility
    return front


def solve_offline_oracle(
    per_slot_candidates: Sequence[Sequence[SlotCandidate]],
    budget: float,
    grid: float | None = None,
) -> OfflinePlan:
    """Pick one candidate per slot maximizing total utility within the carbon budget.

    Dynamic program over slots and a discretized remaining budget. Carbon is
    rounded up to the grid (default budget/10000), so the returned plan is
    always feasible against the true budget; the accumulated round-up is
    reported as grid_slack.
    """
    if grid is None:
        grid = budget / 10_000.0
    if not grid > 0:
        raise ValueError(f"grid must be positive, got {grid}")
    if budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    horizon = len(per_slot_candidates)
    if horizon == 0:
        raise ValueError("need at least one slot")
    for t, cands in enumerate(per_slot_candidates):
        if len(cands) == 0:
            raise ValueError(f"slot {t} has no candidates")
        for cand in cands:
            if not math.isfinite(cand.utility):
                raise ValueError(f"non-finite utility at slot {t}")
            if cand.carbon < 0:
                raise ValueError(f"negative carbon at slot {t}")

    capacity = int(math.floor(budget / grid + 1e-9))
    fronts = [_pareto_front(cands, grid) for cands in per_slot_candidates]

    min_units = sum(front[0][1] for front in fronts)
    if min_units > capacity:
        raise InfeasiblePlanError(
            f"cheapest plan needs {min_units} grid units, budget allows {capacity}"
        )

    neg_inf = -math.inf
    value = np.full(capacity + 1, 0.0)
    choice = np.zeros((horizon, capacity + 1), dtype=np.int32)
    for t in range(horizon):
        nxt = np.full(capacity + 1, neg_inf)
        for cand_idx, units in fronts[t]:
            u = per_slot_candidates[t][cand_idx].utility
            if units > capacity:
                continue
            shifted = np.full(capacity + 1, neg_inf)
            shifted[units:] = value[: capacity + 1 - units] + u
            better = shifted > nxt
            nxt[better] = shifted[better]
            choice[t][better] = cand_idx
        value = nxt

    best_w = int(np.argmax(value))
    if not math.isfinite(value[best_w]):
        raise InfeasiblePlanError("no feasible plan found")  # pragma: no cover

    selections = []
    total_utility = 0.0
    total_carbon = 0.0
    gridded = 0.0
    w = best_w
    for t in range(horizon - 1, -1, -1):
        cand = per_slot_candidates[t][int(choice[t][w])]
        selections.append(cand.selection)
        total_utility += cand.utility
        total_carbon += cand.carbon
        units = _grid_units(cand.carbon, grid)
        gridded += units * grid
        w -= units
    selections.reverse()
    return OfflinePlan(
        selections=tuple(selections),
        total_utility=total_utility,
        total_carbon=total_carbon,
        grid_slack=max(0.0, gridded - total_carbon),
    )
