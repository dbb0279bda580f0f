"""Bias-corrected two-stage estimation of latent variable regressions.

Factor score regression is fast but biased; this package removes the bias
by stochastic approximation and supplies sandwich standard errors.
"""

from .acm import ACMConfig, ACMResult, compute_acm
from .correction import RMConfig, RMTrace, robbins_monro
from .exceptions import (
    DataError,
    DivergenceError,
    DomainError,
    InferenceError,
    NumericalError,
    StructuralError,
    TSBCError,
)
from .harness import StudyConfig, aggregate, run_replication, run_study
from .models import StudyModel
from .params import FeasibilitySpec, ParameterPartition, ParameterVector

__version__ = "0.1.0"

__all__ = [
    "ACMConfig",
    "ACMResult",
    "DataError",
    "DivergenceError",
    "DomainError",
    "FeasibilitySpec",
    "InferenceError",
    "NumericalError",
    "ParameterPartition",
    "ParameterVector",
    "RMConfig",
    "RMTrace",
    "StructuralError",
    "StudyConfig",
    "StudyModel",
    "TSBCError",
    "aggregate",
    "compute_acm",
    "robbins_monro",
    "run_replication",
    "run_study",
]
