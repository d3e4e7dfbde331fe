"""Simulated three-bellows tilt platform with feed-forward plus variable-gain I control."""

from .bellows import (BellowsParams, BellowsState, EffectiveArea, equilibrium_length,
                      pneumatic_stiffness, pressure_for_length, simulate_step_response)
from .calibration import (FFModel, LookupTolerances, PointCloud, build_ffmodel, feedforward,
                          fit_surface, lookup_pressures)
from .config import RunConfig, load_config, parse_config
from .controller import (FFvIController, FFvIParams, FFvIState, PIDController, PIDGains,
                         VariableGainLaw, ffvi_step, gain, pid_step, total_error)
from .experiments import Metrics, StepSpec, Trajectory, compute_metrics
from .kinematics import PlatformGeometry, Tilt, forward_kinematics, inverse_kinematics
from .plant import PlantParams, PlantState, generate_point_cloud, static_tilt, step

__version__ = "0.1.0"
