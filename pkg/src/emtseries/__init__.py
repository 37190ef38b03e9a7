"""emtseries: state-space EMT simulation with a high-order series integrator.

The integrator expands every state in Taylor coefficients each step via
coupled per-order recursions (machine, controllers, linear network), sizes
steps from the exact network-equation imbalance, reconstructs interior values
by evaluating the step polynomial, and pins controller limits by locating
their crossing instants inside large steps.
"""

from .series import (
    PowerSeries, SeriesMatrix, series_linear, series_mul, series_sincos_step,
    sincos_series, series_magnitude, series_eval, matrix_series_mul,
)
from .machine import (
    MachineParams, GovParams, ExcParams, Machine, init_machine_steady_state,
    build_inductance_series, park_order, inv_park_order,
)
from .network import (
    NetworkTopology, LinearNetwork, Branch, Source, assemble_linear_network,
    network_order_step, apply_event, init_network_steady_state,
)
from .caseio import (
    CaseConfig, load_case, loads_case, dumps_case, save_case, case_hash,
    write_timeseries, bundled_case_path,
)
from .system import System, Snapshot, Trajectory, build_system, initialize
from .solver import (
    SolverConfig, SwitchEvent, StepRecord, SimulationResult, simulate,
    advance_step, imbalance, propose_step, dense_output, detect_limit_switch,
)
from .reference import rk4_run, trapezoidal_run

__version__ = "0.1.0"
