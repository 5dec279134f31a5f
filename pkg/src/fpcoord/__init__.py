"""Fixed-point coordination of coupled subsystems.

Scalar mixing, Riccati-designed matrix filtering and Anderson acceleration
with systematic restarts, applied to the coherence constraint of a
two-layer hierarchical controller.
"""
from .coordinator import (
    CentralCostValue,
    CoordinatorProblem,
    Mode,
    OptimizeResult,
    coordinator_round,
    optimize_decision,
    solve_coherence,
)
from .fp_engine import (
    Anderson,
    AndersonState,
    MatrixFilter,
    Plain,
    ScalarMix,
    SolveReport,
    Termination,
    certify_scalar_mix,
    design_pi_filter,
    run_fixed_point,
    solve_gamma,
    spectral_radius,
)
from .network import (
    CouplingProfile,
    EdgeSpec,
    Layout,
    NetworkTopology,
    build_routing_matrix,
    gather_outgoing,
    scatter_incoming,
)
from .subsystem import (
    BlackBoxSubsystem,
    LinearSubsystem,
    LocalCost,
    build_condensed,
    control_profile,
    respond,
)

__version__ = "0.1.0"
