import numpy as np
import pytest

from carbonfl.fleet import CarbonTrace, EnergyModel, Selection
from carbonfl.lyapunov import ControlParams, PerSlotObjective
from carbonfl.utility import GradientSnapshot, UtilityConfig


def random_snapshot(rng, n, dim=4, scale=1.0):
    """Gradient snapshot with entries ~ N(0, scale^2)."""
    return GradientSnapshot(gradients=rng.normal(0.0, scale, size=(n, dim)))


def snapshot_config(snapshot, margin=1.0):
    """Utility config sized to the snapshot's actual norms."""
    cap = max(snapshot.max_norm * (1.0 + 1e-12), 1e-6) * margin
    return UtilityConfig.for_fleet(snapshot.n_centers, gradient_norm_cap=cap)


def all_selections(n):
    for mask in range(1 << n):
        yield Selection(tuple((mask >> i) & 1 == 1 for i in range(n)))


def nonneg_p2_oracle(rng, n, dim=4):
    """Random drift-plus-penalty instance with b sized so g >= 0 everywhere.

    The coverage term never exceeds 2 N cap and carbon never exceeds its
    all-select value, so b = 2 N cap + q c_max / V plus a margin keeps the
    objective non-negative over the whole lattice (the regime in which the
    double-greedy guarantees are claimed).
    """
    snap = random_snapshot(rng, n, dim)
    cap = snap.max_norm * (1.0 + 1e-9)
    beta = rng.uniform(0.1, 1.0, n)
    active = rng.uniform(0.5, 2.0, n)
    static = rng.uniform(0.0, 0.5, n)
    q = float(rng.uniform(0.0, 2.0))
    c_max = float(beta @ (static + active))
    b = 2 * n * cap + q * c_max + float(rng.uniform(0.1, 5.0))
    cfg = UtilityConfig(b=b, gradient_norm_cap=cap)
    params = ControlParams(V=1.0, H=1.0, T=1, q0=0.0)
    energy = EnergyModel(static_kwh=tuple(static), active_kwh=tuple(active))
    trace = CarbonTrace(intensities=beta[None, :])
    return PerSlotObjective(snap, q, 0, params, energy, trace, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
