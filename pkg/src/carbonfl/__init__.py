"""Carbon-aware data-center selection for federated learning.

Core pieces: a fleet energy/carbon model, a coreset utility over probed
gradients, a drift-plus-penalty controller with submodular per-slot solvers,
a synthetic federated learning task, and a reproducible experiment harness.
"""

from .fleet import (
    CarbonTrace,
    EnergyModel,
    FleetConfig,
    Selection,
    carbon_per_center,
    carbon_total,
    energy_per_slot,
    static_floor,
)
from .utility import (
    GradientSnapshot,
    UtilityConfig,
    empirical_divergence,
    empirical_gradient_bound,
    utility,
)
from .lyapunov import (
    BoundConstants,
    BoundReport,
    ControlParams,
    PerSlotObjective,
    VirtualQueue,
    build_bound_report,
    per_slot_objective,
    queue_update,
    theorem1_rhs,
    theorem2_rhs,
)
from .solvers import (
    InfeasiblePlanError,
    OfflinePlan,
    SlotCandidate,
    SolveResult,
    solve_budget_greedy,
    solve_det_double_greedy,
    solve_exhaustive,
    solve_offline_oracle,
    solve_rand_double_greedy,
)
from .fedsim import (
    CenterDataset,
    ModelState,
    SyntheticTask,
    TaskData,
    TrainConfig,
    exact_gradient,
    full_participation_trajectory,
    generate_task,
    probe_gradient,
    probe_snapshot,
    run_local_round,
)
from .controller import (
    PolicySpec,
    RunResult,
    SlotRecord,
    run_adaptive_myopic,
    run_cafe,
    run_extreme,
    run_offline_oracle,
    run_policy,
    run_static_myopic,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    MetricsTable,
    default_config,
    run_experiment,
    run_sweep,
    validate_bounds,
)
from .traces import TraceFormatError, load_trace, save_trace, synth_trace

__version__ = "0.1.0"
