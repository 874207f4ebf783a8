"""Virtual carbon-deficit queue, the per-slot drift-plus-penalty objective,
and numeric forms of the constraint-violation and utility lower bounds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

from .fleet import CarbonTrace, EnergyModel, Selection, carbon_total, static_floor
from .utility import GradientSnapshot, UtilityConfig, utility

logger = logging.getLogger(__name__)

# Approximation factor gamma of each per-slot solver: value >= (1/gamma) * optimum.
# The randomized double greedy factor holds in expectation over its seeds.
SOLVER_GAMMA = {
    "exhaustive": 1.0,
    "det_double_greedy": 3.0,
    "rand_double_greedy": 2.0,
}


@dataclass(frozen=True)
class VirtualQueue:
    """Scalar carbon-deficit state, max-clamped at zero; one advance per slot."""

    q: float
    q0: float
    history: tuple[float, ...]

    @classmethod
    def initial(cls, q0: float) -> "VirtualQueue":
        if q0 < 0:
            raise ValueError(f"q0 must be non-negative, got {q0}")
        return cls(q=float(q0), q0=float(q0), history=(float(q0),))


@dataclass(frozen=True)
class ControlParams:
    """Penalty weight V, total carbon budget H (kg), and horizon T.

    V = 0 is admitted as the degenerate carbon-only controller; the utility
    lower bound is undefined there.
    """

    V: float
    H: float
    T: int
    q0: float = 0.0

    def __post_init__(self):
        if self.V < 0:
            raise ValueError(f"V must be non-negative, got {self.V}")
        if not self.H > 0:
            raise ValueError(f"H must be positive, got {self.H}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.q0 < 0:
            raise ValueError(f"q0 must be non-negative, got {self.q0}")

    @property
    def per_slot_budget(self) -> float:
        return self.H / self.T


def check_static_floor_feasible(
    params: ControlParams, energy: EnergyModel, trace: CarbonTrace
) -> list[int]:
    """Slots whose always-on footprint already exceeds H/T.

    A non-empty result means the budget cannot be met even with nobody
    selected; callers warn and proceed.
    """
    bad = [
        t
        for t in range(min(params.T, trace.horizon))
        if static_floor(energy, trace, t) > params.per_slot_budget
    ]
    if bad:
        logger.warning(
            "static carbon floor exceeds per-slot budget %.6g kg in %d of %d slots "
            "(first at t=%d)",
            params.per_slot_budget,
            len(bad),
            params.T,
            bad[0],
        )
    return bad


def queue_update(queue: VirtualQueue, c_t: float, params: ControlParams) -> VirtualQueue:
    """Advance the deficit queue by one slot: q <- max(0, c_t - H/T + q)."""
    if c_t < 0:
        raise ValueError(f"carbon must be non-negative, got {c_t}")
    q_new = max(0.0, c_t - params.per_slot_budget + queue.q)
    return VirtualQueue(q=q_new, q0=queue.q0, history=queue.history + (q_new,))


def per_slot_objective(
    snapshot: GradientSnapshot,
    selection: Selection,
    q: float,
    t: int,
    params: ControlParams,
    energy: EnergyModel,
    trace: CarbonTrace,
    cfg: UtilityConfig,
) -> float:
    """Drift-plus-penalty value V * U(a) - q * c(a) for one candidate selection."""
    return params.V * utility(snapshot, selection, cfg) - q * carbon_total(
        energy, trace, t, selection
    )


class PerSlotObjective:
    """Reusable evaluation oracle for one slot's drift-plus-penalty problem.

    Precomputes the carbon decomposition (static floor plus per-center
    increments) so each call touches the cached distance matrix only.
    """

    def __init__(
        self,
        snapshot: GradientSnapshot,
        q: float,
        t: int,
        params: ControlParams,
        energy: EnergyModel,
        trace: CarbonTrace,
        cfg: UtilityConfig,
    ):
        cfg.validate_for(snapshot.n_centers)
        self.snapshot = snapshot
        self.q = float(q)
        self.V = params.V
        self.cfg = cfg
        beta = trace.at(t)
        self._floor = float(beta @ energy.static_array())
        self._increments = beta * energy.active_array()

    @property
    def n_centers(self) -> int:
        return self.snapshot.n_centers

    def carbon(self, selection: Selection) -> float:
        return self._floor + float(self._increments[selection.as_array()].sum())

    def __call__(self, selection: Selection) -> float:
        return self.V * utility(self.snapshot, selection, self.cfg) - self.q * self.carbon(
            selection
        )


@dataclass(frozen=True)
class BoundConstants:
    """Every constant the theorem bounds consume, as realized by one run."""

    n_centers: int
    G: float
    delta_max: float
    B1: float
    c_max: float
    gamma: float
    b: float
    q0: float
    V: float
    T: int
    H: float

    def as_dict(self) -> dict[str, float]:
        return {
            "n_centers": float(self.n_centers),
            "G": self.G,
            "delta_max": self.delta_max,
            "B1": self.B1,
            "c_max": self.c_max,
            "gamma": self.gamma,
            "b": self.b,
            "q0": self.q0,
            "V": self.V,
            "T": float(self.T),
            "H": self.H,
        }


Theorem1Variant = Literal["main_text", "appendix"]


def theorem1_rhs(constants: BoundConstants, variant: Theorem1Variant = "appendix") -> float:
    """Upper bound on the average per-slot budget overshoot (1/T) sum c^t - H/T.

    The two variants differ in their solver-dependent constant: the main-text
    form uses (b + N G), the appendix derivation ((gamma - 1) b + 2 N G).
    """
    g = constants.gamma
    if g < 1:
        raise ValueError(f"gamma must be >= 1, got {g}")
    ng = constants.n_centers * constants.G
    if variant == "main_text":
        core = constants.b + ng
    elif variant == "appendix":
        core = (g - 1.0) * constants.b + 2.0 * ng
    else:
        raise ValueError(f"unknown variant {variant!r}")
    q0, T = constants.q0, constants.T
    arg = (q0 / T) ** 2 + ((2.0 * constants.V / g) * core + 2.0 * constants.B1) / T
    if arg < 0:
        raise ValueError(f"negative square-root argument {arg}")
    return math.sqrt(arg) - q0 / T


def theorem2_rhs(constants: BoundConstants, opt_value: float) -> float:
    """Lower bound on the realized average utility given the offline optimum."""
    g = constants.gamma
    if g < 1:
        raise ValueError(f"gamma must be >= 1, got {g}")
    if not constants.V > 0:
        raise ValueError("the utility bound requires V > 0")
    V, T = constants.V, constants.T
    gap_noniid = 4.0 * constants.n_centers * constants.delta_max / g
    gap_queue = (constants.q0 * constants.c_max / g + constants.q0**2 / (2.0 * T)) / V
    gap_budget = ((T * constants.c_max - constants.H) * constants.c_max / g + constants.B1) / V
    return opt_value / g - gap_noniid - gap_queue - gap_budget


@dataclass(frozen=True)
class BoundReport:
    """Empirical check of the theorem bounds against one completed run.

    The constraint bound is asserted against the looser of its two variants
    (the main text and the appendix derivation disagree on a constant); the
    utility bound is checked only when an offline-optimum value is supplied.
    """

    avg_violation: float
    thm1_rhs_main: float
    thm1_rhs_appendix: float
    thm1_pass_main: bool
    thm1_pass_appendix: bool
    thm1_pass: bool
    avg_utility: float
    thm2_opt: float | None
    thm2_rhs: float | None
    thm2_pass: bool | None
    nonnegativity_held: bool | None
    constants: BoundConstants

    def to_text(self) -> str:
        lines = [
            f"avg_violation: {self.avg_violation!r}",
            f"thm1_rhs_main: {self.thm1_rhs_main!r}",
            f"thm1_rhs_appendix: {self.thm1_rhs_appendix!r}",
            f"thm1_pass_main: {self.thm1_pass_main}",
            f"thm1_pass_appendix: {self.thm1_pass_appendix}",
            f"thm1_pass: {self.thm1_pass}",
            f"avg_utility: {self.avg_utility!r}",
        ]
        if self.thm2_rhs is None:
            lines.append("thm2: skipped (no offline-optimum artifact)")
        else:
            lines.append(f"thm2_opt: {self.thm2_opt!r}")
            lines.append(f"thm2_rhs: {self.thm2_rhs!r}")
            lines.append(f"thm2_pass: {self.thm2_pass}")
        if self.nonnegativity_held is not None:
            lines.append(f"objective_nonnegativity_held: {self.nonnegativity_held}")
        for key, val in self.constants.as_dict().items():
            lines.append(f"const_{key}: {val!r}")
        return "\n".join(lines) + "\n"


THM2_TOLERANCE = 1e-9


def build_bound_report(
    carbons: "Sequence[float]",
    utilities: "Sequence[float]",
    constants: BoundConstants,
    opt_value: float | None = None,
    min_objective_seen: float | None = None,
) -> BoundReport:
    """Evaluate both theorem inequalities on a run's realized series."""
    if len(carbons) != constants.T or len(utilities) != constants.T:
        raise ValueError(
            f"expected {constants.T} slots, got {len(carbons)} carbons / "
            f"{len(utilities)} utilities"
        )
    avg_violation = float(sum(carbons)) / constants.T - constants.H / constants.T
    rhs_main = theorem1_rhs(constants, "main_text")
    rhs_appendix = theorem1_rhs(constants, "appendix")
    pass_main = avg_violation <= rhs_main
    pass_appendix = avg_violation <= rhs_appendix
    avg_utility = float(sum(utilities)) / constants.T
    thm2_rhs_val = None
    thm2_pass = None
    if opt_value is not None:
        thm2_rhs_val = theorem2_rhs(constants, opt_value)
        thm2_pass = avg_utility >= thm2_rhs_val - THM2_TOLERANCE
    return BoundReport(
        avg_violation=avg_violation,
        thm1_rhs_main=rhs_main,
        thm1_rhs_appendix=rhs_appendix,
        thm1_pass_main=pass_main,
        thm1_pass_appendix=pass_appendix,
        thm1_pass=avg_violation <= max(rhs_main, rhs_appendix),
        avg_utility=avg_utility,
        thm2_opt=opt_value,
        thm2_rhs=thm2_rhs_val,
        thm2_pass=thm2_pass,
        nonnegativity_held=(
            None if min_objective_seen is None else bool(min_objective_seen >= 0.0)
        ),
        constants=constants,
    )
