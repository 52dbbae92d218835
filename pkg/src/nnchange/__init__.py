"""Change-point detection and estimation in nonlinear autoregressions with
one-hidden-layer neural networks."""

__version__ = "0.1.0"

from nnchange.changepoint import change_point_estimate, simulate_limit_argmax
from nnchange.covariance import split_covariance, weight_matrix_for_rule
from nnchange.critical_values import critical_value
from nnchange.fitting import FitConfig, embed_series, fit_network
from nnchange.nn_model import NetworkParams, NetworkShape, canonicalize, eval_network, grad_network
from nnchange.procedure import compute_statistics, run_test
from nnchange.score_stats import WeightConfig, WeightMatrix, test_statistic

__all__ = [
    "FitConfig",
    "NetworkParams",
    "NetworkShape",
    "WeightConfig",
    "WeightMatrix",
    "__version__",
    "canonicalize",
    "change_point_estimate",
    "compute_statistics",
    "critical_value",
    "embed_series",
    "eval_network",
    "fit_network",
    "grad_network",
    "run_test",
    "simulate_limit_argmax",
    "split_covariance",
    "test_statistic",
    "weight_matrix_for_rule",
]
