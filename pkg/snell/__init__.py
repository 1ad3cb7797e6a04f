"""
snell package

Approximate optimal stopping on the Brownian exit-time skeleton.
Re-exports the entry points used by the CLI and the tests.
"""

from .config import load_config
from .errors import (CalibrationError, ConfigError, CouplingError, DomainError, ExperimentError, ModelFileError,
                     NumericError, SamplerError, SnellError, TreeSizeError)
from .experiment import ExperimentConfig, make_phi, plan_steps, run_experiment
from .fbm_kernel import FbmParams, driver_from_skeleton, kernel_K, with_calibration
from .skeleton import SkeletonConfig, build_skeleton, grid_query, num_steps, simulate_skeletons
from .state_models import drifted_fbm_path, euler_path, make_coefficients, make_payoff, reward_path
from .stop_dp import BasisSpec, backward_induction, exact_tree_dp, lower_bound_estimate

__all__ = [
    'BasisSpec', 'CalibrationError', 'ConfigError', 'CouplingError', 'DomainError', 'ExperimentConfig',
    'ExperimentError', 'FbmParams', 'ModelFileError', 'NumericError', 'SamplerError', 'SkeletonConfig',
    'SnellError', 'TreeSizeError', 'backward_induction', 'build_skeleton', 'driver_from_skeleton', 'drifted_fbm_path',
    'euler_path', 'exact_tree_dp', 'grid_query', 'kernel_K', 'load_config', 'lower_bound_estimate',
    'make_coefficients', 'make_payoff', 'make_phi', 'num_steps', 'plan_steps', 'reward_path',
    'run_experiment', 'simulate_skeletons', 'with_calibration',
]

__version__ = "0.1.0"
