import math

import numpy as np
import pytest

from carbonfl.fleet import Selection
from carbonfl.utility import (
    GradientSnapshot,
    UtilityConfig,
    empirical_divergence,
    empirical_gradient_bound,
    utility,
)

from conftest import all_selections, random_snapshot, snapshot_config


def test_single_selected_center_covers_itself_at_zero():
    snap = GradientSnapshot(gradients=np.array([[1.0, 0.0], [0.0, 1.0]]))
    cfg = UtilityConfig(b=10.0, gradient_norm_cap=2.5)
    val = utility(snap, Selection.from_indices(2, [0]), cfg)
    assert val == pytest.approx(10.0 - math.sqrt(2.0))


def test_empty_selection_uses_max_norm_rule():
    snap = GradientSnapshot(gradients=np.array([[1.0, 0.0], [0.0, 1.0]]))
    cfg = UtilityConfig(b=10.0, gradient_norm_cap=2.5)
    # b - 2 * N * max-norm with unit norms and N = 2.
    assert utility(snap, Selection.empty(2), cfg) == pytest.approx(6.0)


def test_full_selection_scores_exactly_b(rng):
    snap = random_snapshot(rng, n=5)
    cfg = snapshot_config(snap)
    assert utility(snap, Selection.full(5), cfg) == pytest.approx(cfg.b)


def test_norm_cap_is_enforced():
    snap = GradientSnapshot(gradients=np.array([[3.0, 4.0]]))
    cfg = UtilityConfig(b=2.0, gradient_norm_cap=1.0)
    with pytest.raises(ValueError, match="exceeds configured cap"):
        utility(snap, Selection.full(1), cfg)


def test_b_floor_is_enforced():
    snap = GradientSnapshot(gradients=np.zeros((3, 2)))
    cfg = UtilityConfig(b=1.0, gradient_norm_cap=10.0)  # needs b >= 60
    with pytest.raises(ValueError, match="below 2\\*N\\*cap"):
        utility(snap, Selection.full(3), cfg)


def test_gradient_bound_examples():
    one = GradientSnapshot(gradients=np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert empirical_gradient_bound([one]) == pytest.approx(5.0)
    zeros = GradientSnapshot(gradients=np.zeros((2, 2)))
    assert empirical_gradient_bound([zeros]) == 0.0
    assert empirical_gradient_bound([one, zeros]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        empirical_gradient_bound([])


def test_divergence_identical_gradients_is_zero():
    snap = GradientSnapshot(gradients=np.tile([1.5, -0.5], (4, 1)))
    assert empirical_divergence(snap) == 0.0


def test_divergence_symmetric_pair():
    snap = GradientSnapshot(gradients=np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert empirical_divergence(snap) == pytest.approx(1.0)


def test_divergence_matches_direct_recomputation(rng):
    snap = random_snapshot(rng, n=3, dim=5)
    mean = snap.gradients.mean(axis=0)
    expected = max(np.linalg.norm(g - mean) for g in snap.gradients)
    assert empirical_divergence(snap) == pytest.approx(expected, rel=1e-12)


def test_adding_a_center_never_decreases_utility(rng):
    for _ in range(20):
        snap = random_snapshot(rng, n=6)
        cfg = snapshot_config(snap)
        for sel in all_selections(6):
            base = utility(snap, sel, cfg)
            for j in range(6):
                if not sel.bits[j]:
                    assert utility(snap, sel.with_bit(j, True), cfg) >= base - 1e-12


def test_selection_part_is_submodular(rng):
    # Marginal gain of j at a subset dominates its gain at any superset.
    n = 5
    for _ in range(10):
        snap = random_snapshot(rng, n=n)
        cfg = snapshot_config(snap)
        values = {sel.bits: utility(snap, sel, cfg) for sel in all_selections(n)}
        for small in all_selections(n):
            if small.count == 0:
                continue
            small_set = set(small.members)
            for big in all_selections(n):
                if big.count == 0 or not small_set <= set(big.members):
                    continue
                for j in range(n):
                    if big.bits[j]:
                        continue
                    gain_small = values[small.with_bit(j, True).bits] - values[small.bits]
                    gain_big = values[big.with_bit(j, True).bits] - values[big.bits]
                    assert gain_small >= gain_big - 1e-9


def test_nonnegative_for_every_selection_with_default_b(rng):
    for _ in range(20):
        snap = random_snapshot(rng, n=4)
        cap = snap.max_norm + 0.1
        cfg = UtilityConfig.for_fleet(4, gradient_norm_cap=cap)
        for sel in all_selections(4):
            assert utility(snap, sel, cfg) >= 0.0


def test_utility_gap_bounded_by_divergences(rng):
    # |U(a|w1) - U(a|w2)| <= 4 N max(delta1, delta2) for any fixed selection.
    n = 5
    for _ in range(25):
        snap1 = random_snapshot(rng, n=n, dim=3)
        snap2 = random_snapshot(rng, n=n, dim=3)
        cap = max(snap1.max_norm, snap2.max_norm) + 0.1
        cfg = UtilityConfig.for_fleet(n, gradient_norm_cap=cap)
        bound = 4.0 * n * max(empirical_divergence(snap1), empirical_divergence(snap2))
        for sel in all_selections(n):
            if sel.count == 0:
                continue
            gap = abs(utility(snap1, sel, cfg) - utility(snap2, sel, cfg))
            assert gap <= bound + 1e-9


def test_snapshot_rejects_bad_shapes():
    with pytest.raises(ValueError):
        GradientSnapshot(gradients=np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        GradientSnapshot(gradients=np.array([[np.nan, 0.0]]))


def test_selection_dimension_mismatch(rng):
    snap = random_snapshot(rng, n=3)
    cfg = snapshot_config(snap)
    with pytest.raises(ValueError):
        utility(snap, Selection.full(4), cfg)
