"""DeCov: penalising cross-covariance of hidden activations, from scratch in numpy."""

from .decov import (
    CovMatrix,
    DecovDiagnostics,
    DecovPenalty,
    covariance,
    decov_backward,
    decov_forward,
    importance_weighted_gradient,
    offdiag_covariance_norm,
)
from .tensor import Rng

__all__ = [
    "CovMatrix",
    "DecovDiagnostics",
    "DecovPenalty",
    "Rng",
    "covariance",
    "decov_backward",
    "decov_forward",
    "importance_weighted_gradient",
    "offdiag_covariance_norm",
]
