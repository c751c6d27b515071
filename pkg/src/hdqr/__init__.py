"""Post-selection inference for a treatment coefficient in high-dimensional quantile regression."""

from .core import Dataset, SparseCoef, check_loss, inv_normal_cdf, score_fn, standardize, truncate_top_k
from .density import DensityConfig, default_bandwidth, estimate_density
from .errors import HdqrError, StageError
from .ivqr import InferenceReport, inversion_ci, score_statistic, variance_estimators, wald_ci
from .pipeline import (PipelineConfig, run, run_algorithm1, run_algorithm2, run_full, run_methods,
                       run_naive)
from .pqr import PqrConfig, post_refit_qr, solve_l1qr
from .wlasso import WLassoConfig, fit_wlasso, solve_wlasso

__version__ = "0.1.0"

__all__ = [
    "Dataset", "SparseCoef", "check_loss", "inv_normal_cdf", "score_fn", "standardize",
    "truncate_top_k", "DensityConfig", "default_bandwidth", "estimate_density", "HdqrError",
    "StageError", "InferenceReport", "inversion_ci", "score_statistic", "variance_estimators",
    "wald_ci", "PipelineConfig", "run", "run_algorithm1", "run_algorithm2", "run_full",
    "run_methods", "run_naive", "PqrConfig", "post_refit_qr", "solve_l1qr", "WLassoConfig",
    "fit_wlasso", "solve_wlasso",
]
