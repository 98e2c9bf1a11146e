"""Simulation and fluid-limit analysis of pull-based load distribution.

Heterogeneous server pools behind a fixed set of routers; idle servers
advertise themselves with pull-messages.  The package provides the exact
event-driven simulator (including a monotone coupled-pair mode), the
deterministic fluid dynamics of the aggregated state, the equilibrium
point, and an experiment harness with a command-line front end.
"""

from .model import (
    UNBOUNDED,
    BadFractionsError,
    ConfigError,
    DimensionMismatchError,
    EmptyPoolError,
    FullState,
    InvariantViolationError,
    MeanFieldState,
    NonSubcriticalError,
    SystemConfig,
    full_state_leq,
    mean_field_leq,
    mean_field_project,
    state_distance,
    validate_config,
)
from .equilibrium import (
    DegeneratePoolError,
    EquilibriumPoint,
    equilibrium_residual,
    solve_equilibrium,
)
from .fluid import (
    BoundaryPreconditionError,
    EmptyRouterError,
    FluidTrajectory,
    UndefinedFieldError,
    boundary_derivative,
    fluid_derivative,
    integrate_fluid,
    max_unit_buffer_state,
)
from .streams import EventStream, Substream
from .simulator import (
    PULL1,
    PULL2,
    RANDOM,
    DepartureFromIdleError,
    FullInitWithUnboundedBufferError,
    Policy,
    SimMetrics,
    SimResult,
    SimulationState,
    TraceSample,
    apply_arrival,
    apply_departure,
    init_state,
    route,
    simulate,
)
from .coupling import DominanceReport, InitialNotOrderedError, coupled_simulate
from .harness import (
    ExperimentSpec,
    InsufficientDataError,
    SpecParseError,
    SteadyStateEstimate,
    SweepTable,
    estimate_steady_state,
    export,
    export_trajectory,
    load_spec,
    read_table,
    run_cell,
    run_sweep,
    table_columns,
)

__all__ = [name for name in dir() if not name.startswith("_")]
