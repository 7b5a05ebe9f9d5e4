"""Continuous-time q-learning for entropy-regularized mean-field control."""
from .models import (
    CONSUMPTION,
    MEAN_VARIANCE,
    DomainError,
    LogMeanState,
    MeanVarianceState,
    ModelSpec,
    benchmark_consumption,
    benchmark_mean_variance,
    make_consumption,
    make_mean_variance,
)
from .params import QParams, ValueParams, family_for, true_params

__version__ = "0.1.0"

__all__ = [
    "CONSUMPTION",
    "MEAN_VARIANCE",
    "DomainError",
    "LogMeanState",
    "MeanVarianceState",
    "ModelSpec",
    "QParams",
    "ValueParams",
    "benchmark_consumption",
    "benchmark_mean_variance",
    "family_for",
    "make_consumption",
    "make_mean_variance",
    "true_params",
]
