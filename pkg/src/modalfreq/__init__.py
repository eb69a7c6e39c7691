"""Modal prediction of power-system frequency response and nadir.

The pipeline runs power flow, builds the machine/exciter/governor DAE,
linearizes it, keeps the slow governor-driven modes and evaluates the
centre-of-inertia frequency analytically. A trapezoidal DAE simulator
serves as the reference.
"""

from .dynamics import CoiWeights, StateLayout, SystemState, coi_weights, init_dynamic_state
from .grid import (CaseError, GenTrip, GridCase, LoadStep, NoDisturbance, PowerFlowError,
                   apply_scenario, builtin_case_path, load_case, parse_case, parse_scenario,
                   scale_inertia, scale_operating_point, solve_power_flow)
from .linearize import LinearModel, equilibrate, kron_reduce, linearize
from .modal import ModalBasis, ModeSet, eigendecompose, participation_factors, select_modes
from .nadir import NadirPrediction, predict_nadir, settled_imbalance
from .simulator import SimulationError, Trajectory, coi_frequency, simulate
from .study import ModalStudy, ScanRow, modal_study, predict, run_oracle, sensitivity_scan

__version__ = "0.1.0"
