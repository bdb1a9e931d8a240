"""mfaimd: simulation and equilibrium analysis of multi-class networks of
intermittent (ON/OFF) AIMD connections."""

__version__ = "0.1.0"

from .model import (
    OFF,
    ClassParams,
    ConfigError,
    Constant,
    Dirac,
    Exponential,
    LoadAffine,
    ModelConfig,
    ReciprocalLoadAffine,
    Uniform,
    UserState,
    WindowTimesLoadAffine,
    config_from_doc,
    eval_rates,
    load_config,
    node_loads,
    plus,
    trace_distance,
    validate_config,
)
from .particle import SimulationError, SystemState, TrajectoryEnsemble, simulate_euler, simulate_exact
from .mckean import LoadTrajectory, PicardReport, coupling_distance, picard_solve, simulate_frozen_load
from .equilibrium import (
    FixedPointReport,
    HazardFunctionalEstimate,
    InfiniteMassError,
    StationaryLaw,
    closed_form_fixed_point,
    fixed_point_solve,
    hazard_functional,
    simulate_permanent,
    stationary_law,
)
from .analysis import (
    ChaosReport,
    EmpiricalSnapshot,
    ErgodicEstimate,
    chaoticity_report,
    ergodic_average,
    wasserstein1,
)
