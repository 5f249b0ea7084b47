"""MAP and minimum-energy state-path estimation for stochastic differential equations."""

__version__ = '0.1.0'

from sdemap.model import benchmark_names, get_benchmark, register_benchmark
from sdemap.objective import (
    euler_log_posterior,
    trapezoidal_log_posterior,
    value_and_gradient
)
from sdemap.sim import generate_dataset, simulate
from sdemap.solve import EstimationProblem, SolverConfig, estimate, maximize
from sdemap.oracle import dense_map, discretize_linear, rts_smoother
from sdemap.metrics import aggregate, ise

__all__ = [
    '__version__',
    'benchmark_names',
    'get_benchmark',
    'register_benchmark',
    'euler_log_posterior',
    'trapezoidal_log_posterior',
    'value_and_gradient',
    'generate_dataset',
    'simulate',
    'EstimationProblem',
    'SolverConfig',
    'estimate',
    'maximize',
    'dense_map',
    'discretize_linear',
    'rts_smoother',
    'aggregate',
    'ise'
]
