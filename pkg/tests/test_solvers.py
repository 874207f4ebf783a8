import itertools
import math

import numpy as np
import pytest

from carbonfl.fleet import Selection
from carbonfl.solvers import (
    InfeasiblePlanError,
    SlotCandidate,
    enumerate_slot_candidates,
    solve_budget_greedy,
    solve_det_double_greedy,
    solve_exhaustive,
    solve_offline_oracle,
    solve_rand_double_greedy,
)

from conftest import all_selections, nonneg_p2_oracle


class ModularOracle:
    """g(S) = offset + sum of per-element weights; the simplest submodular case."""

    def __init__(self, weights, offset=0.0):
        self.weights = list(weights)
        self.offset = offset
        self.n_centers = len(self.weights)

    def __call__(self, sel: Selection) -> float:
        return self.offset + sum(w for w, bit in zip(self.weights, sel.bits) if bit)


class TestExhaustive:
    def test_two_candidate_instance(self):
        result = solve_exhaustive(ModularOracle([5.0]))
        assert result.selection.members == (0,)
        assert result.value == 5.0

    def test_matches_independent_enumeration(self, rng):
        oracle = nonneg_p2_oracle(rng, n=3)
        result = solve_exhaustive(oracle)
        # Second enumeration, written independently of the solver's loop.
        best_val = -math.inf
        for r in range(4):
            for combo in itertools.combinations(range(3), r):
                val = oracle(Selection.from_indices(3, combo))
                best_val = max(best_val, val)
        assert result.value == pytest.approx(best_val, rel=1e-12)

    def test_dominant_penalty_selects_nothing(self, rng):
        oracle = ModularOracle([-1e9, -2e9, -5e8], offset=1.0)
        result = solve_exhaustive(oracle)
        assert result.selection.count == 0
        assert result.value == 1.0

    def test_evaluation_count_is_2_to_n(self, rng):
        for n in (1, 4, 7):
            oracle = nonneg_p2_oracle(rng, n=n)
            assert solve_exhaustive(oracle).evaluations == 2**n

    def test_value_self_consistency(self, rng):
        oracle = nonneg_p2_oracle(rng, n=5)
        result = solve_exhaustive(oracle)
        assert oracle(result.selection) == pytest.approx(result.value, rel=1e-12)

    def test_guard_on_large_n(self):
        with pytest.raises(ValueError):
            solve_exhaustive(ModularOracle([1.0] * 25))


class TestDetDoubleGreedy:
    def test_single_element_picks_better_of_two(self):
        take = solve_det_double_greedy(ModularOracle([3.0]))
        assert take.selection.members == (0,)
        skip = solve_det_double_greedy(ModularOracle([-3.0]))
        assert skip.selection.count == 0

    def test_modular_objective_recovers_positive_support(self, rng):
        for _ in range(20):
            weights = rng.normal(size=8)
            weights[np.abs(weights) < 1e-6] = 0.5  # keep marginals nonzero
            result = solve_det_double_greedy(ModularOracle(weights, offset=10.0))
            assert set(result.selection.members) == {
                j for j, w in enumerate(weights) if w > 0
            }
            exact = solve_exhaustive(ModularOracle(weights, offset=10.0))
            assert result.value == pytest.approx(exact.value, rel=1e-12)

    def test_one_third_guarantee_on_random_instances(self, rng):
        for _ in range(200):
            oracle = nonneg_p2_oracle(rng, n=10)
            opt = solve_exhaustive(oracle).value
            assert opt >= 0.0
            got = solve_det_double_greedy(oracle).value
            assert got >= opt / 3.0 - 1e-9

    def test_evaluation_budget(self, rng):
        for n in (1, 5, 10):
            oracle = nonneg_p2_oracle(rng, n=n)
            assert solve_det_double_greedy(oracle).evaluations <= 2 * n + 2

    def test_value_self_consistency(self, rng):
        oracle = nonneg_p2_oracle(rng, n=6)
        result = solve_det_double_greedy(oracle)
        assert oracle(result.selection) == pytest.approx(result.value, rel=1e-12)


class TestRandDoubleGreedy:
    def test_certain_accept_when_drop_gain_nonpositive(self):
        # Every weight positive: u_j > 0 and v_j < 0 at each step, so every
        # seed must accept every center.
        oracle = ModularOracle([2.0, 1.0, 3.0], offset=5.0)
        for seed in range(10):
            result = solve_rand_double_greedy(oracle, seed)
            assert result.selection.count == 3

    def test_seed_determinism(self, rng):
        oracle = nonneg_p2_oracle(rng, n=7)
        a = solve_rand_double_greedy(oracle, 1234)
        b = solve_rand_double_greedy(oracle, 1234)
        assert a.selection == b.selection
        assert a.value == b.value
        assert a.evaluations == b.evaluations

    def test_half_guarantee_monte_carlo(self, rng):
        oracle = nonneg_p2_oracle(rng, n=6)
        opt = solve_exhaustive(oracle).value
        values = np.array(
            [solve_rand_double_greedy(oracle, seed).value for seed in range(2000)]
        )
        stderr = values.std(ddof=1) / math.sqrt(len(values))
        assert values.mean() >= 0.5 * opt - 3.0 * stderr

    def test_non_submodular_objective_trips_step_invariant(self):
        class Supermodular:
            n_centers = 3

            def __call__(self, sel: Selection) -> float:
                return float(sel.count**2)

        with pytest.raises(AssertionError, match="not submodular"):
            solve_rand_double_greedy(Supermodular(), 0)

    def test_value_self_consistency(self, rng):
        oracle = nonneg_p2_oracle(rng, n=6)
        result = solve_rand_double_greedy(oracle, 99)
        assert oracle(result.selection) == pytest.approx(result.value, rel=1e-12)


class UtilityOnlyOracle:
    def __init__(self, values):
        # values maps bit tuples to floats; must be monotone submodular.
        self._values = values
        self.n_centers = len(next(iter(values)))

    def __call__(self, sel: Selection) -> float:
        return self._values[sel.bits]


class TestBudgetGreedy:
    def test_budget_below_floor_is_infeasible(self):
        oracle = ModularOracle([1.0, 1.0], offset=0.0)
        result = solve_budget_greedy(
            oracle, per_center_cost=[1.0, 1.0], budget=2.0, static_floor=3.0
        )
        assert result.selection.count == 0
        assert not result.feasible

    def test_budget_below_cheapest_increment(self):
        oracle = ModularOracle([5.0, 5.0], offset=0.0)
        result = solve_budget_greedy(
            oracle, per_center_cost=[2.0, 3.0], budget=1.5, static_floor=0.0
        )
        assert result.selection.count == 0
        assert result.feasible

    def test_count_mode_uniform_costs_low_index_tie_break(self):
        oracle = ModularOracle([0.0] * 5, offset=1.0)
        result = solve_budget_greedy(
            oracle,
            per_center_cost=[2.0] * 5,
            budget=6.5,
            maximize="count",
            static_floor=0.0,
        )
        assert result.selection.members == (0, 1, 2)

    def test_count_mode_packs_cheapest_first(self):
        oracle = ModularOracle([0.0] * 4, offset=1.0)
        result = solve_budget_greedy(
            oracle,
            per_center_cost=[5.0, 1.0, 3.0, 2.0],
            budget=6.0,
            maximize="count",
            static_floor=0.0,
        )
        assert set(result.selection.members) == {1, 2, 3}

    def test_utility_mode_never_beats_exhaustive_feasible_optimum(self, rng):
        for _ in range(10):
            oracle = nonneg_p2_oracle(rng, n=6)
            costs = rng.uniform(0.5, 2.0, 6)
            budget = float(rng.uniform(1.0, 5.0))
            result = solve_budget_greedy(
                oracle, per_center_cost=costs.tolist(), budget=budget, static_floor=0.0
            )
            assert float(costs[list(result.selection.members)].sum()) <= budget + 1e-9
            best = max(
                (
                    oracle(sel)
                    for sel in all_selections(6)
                    if float(costs[list(sel.members)].sum()) <= budget
                ),
            )
            assert result.value <= best + 1e-9

    def test_zero_cost_positive_gain_center_selected(self):
        oracle = ModularOracle([4.0, 1.0], offset=0.0)
        result = solve_budget_greedy(
            oracle, per_center_cost=[0.0, 10.0], budget=0.0, static_floor=0.0
        )
        assert result.selection.members == (0,)

    def test_stops_when_no_strict_improvement(self):
        oracle = ModularOracle([0.0, 0.0, 2.0], offset=1.0)
        result = solve_budget_greedy(
            oracle, per_center_cost=[0.1, 0.1, 0.1], budget=10.0, static_floor=0.0
        )
        assert result.selection.members == (2,)


def make_candidates(rng, n, utilities=None, carbons=None):
    sels = list(all_selections(n))
    if utilities is None:
        utilities = rng.uniform(0.0, 10.0, len(sels))
    if carbons is None:
        carbons = rng.uniform(0.0, 5.0, len(sels))
    return [
        SlotCandidate(selection=s, utility=float(u), carbon=float(c))
        for s, u, c in zip(sels, utilities, carbons)
    ]


class TestOfflineOracle:
    def test_single_slot_reduces_to_best_affordable(self, rng):
        cands = make_candidates(rng, 3)
        budget = 2.5
        plan = solve_offline_oracle([cands], budget, grid=budget / 10_000)
        affordable = [c for c in cands if c.carbon <= budget]
        best = max(affordable, key=lambda c: c.utility)
        assert plan.total_utility == pytest.approx(best.utility)

    def test_full_budget_selects_everything(self):
        # Integer carbons and a unit grid make discretization exact.
        n, horizon, b = 3, 4, 60.0
        per_slot = []
        for t in range(horizon):
            cands = []
            for sel in all_selections(n):
                carbon = float(1 + 2 * sel.count)  # all-select: 7 per slot
                utility = b - float(n - sel.count)  # monotone; full set scores b
                cands.append(SlotCandidate(selection=sel, utility=utility, carbon=carbon))
            per_slot.append(cands)
        budget = 7.0 * horizon
        plan = solve_offline_oracle(per_slot, budget, grid=1.0)
        assert all(sel.count == n for sel in plan.selections)
        assert plan.total_utility == pytest.approx(b * horizon)
        assert plan.total_carbon == pytest.approx(budget)

    def test_matches_full_sequence_enumeration(self, rng):
        # Integer carbons with grid 1 make the DP lossless, so it must agree
        # with brute force over all 8^3 selection sequences.
        n, horizon = 3, 3
        per_slot = []
        for t in range(horizon):
            utilities = rng.uniform(0.0, 10.0, 8)
            carbons = rng.integers(1, 6, 8).astype(float)
            per_slot.append(make_candidates(rng, n, utilities, carbons))
        budget = 9.0
        plan = solve_offline_oracle(per_slot, budget, grid=1.0)
        best = -math.inf
        for combo in itertools.product(range(8), repeat=horizon):
            carbon = sum(per_slot[t][i].carbon for t, i in enumerate(combo))
            if carbon <= budget:
                best = max(best, sum(per_slot[t][i].utility for t, i in enumerate(combo)))
        assert plan.total_utility == pytest.approx(best, rel=1e-12)
        assert plan.total_carbon <= budget + 1e-9

    def test_infeasible_budget_raises(self, rng):
        cands = make_candidates(rng, 2, carbons=np.full(4, 5.0))
        with pytest.raises(InfeasiblePlanError):
            solve_offline_oracle([cands], budget=1.0, grid=0.01)

    def test_plan_respects_true_budget_with_default_grid(self, rng):
        per_slot = [make_candidates(rng, 3) for _ in range(4)]
        budget = 8.0
        plan = solve_offline_oracle(per_slot, budget)
        assert plan.total_carbon <= budget + 1e-9
        assert plan.grid_slack >= 0.0
        assert len(plan.selections) == 4


def test_enumerate_slot_candidates_counts(rng):
    def evaluate(sel):
        return float(sel.count), float(sel.count) * 2.0

    cands = enumerate_slot_candidates(3, evaluate)
    assert len(cands) == 8
    with pytest.raises(ValueError):
        enumerate_slot_candidates(13, evaluate)
