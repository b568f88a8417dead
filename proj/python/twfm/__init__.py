"""Two-way factor model for a single data matrix."""

from ._twfm import (
    Dims,
    FitResult,
    ModelParams,
    TwfmError,
    __version__,
    asymptotic_variances,
    dense_sigma,
    fit,
    loading_r2,
    log_det_sigma,
    log_likelihood,
    sample,
    sample_params,
    scalar_loading_variance,
    validate,
)

__all__ = [
    "Dims",
    "FitResult",
    "ModelParams",
    "TwfmError",
    "__version__",
    "asymptotic_variances",
    "dense_sigma",
    "fit",
    "loading_r2",
    "log_det_sigma",
    "log_likelihood",
    "sample",
    "sample_params",
    "scalar_loading_variance",
    "validate",
]
