"""Replica-method predictions for MAP and MMSE estimation under random linear
measurements, with a Monte Carlo harness to check them at finite size."""

from .metrics import ReplicaPrediction, SupportRule, predict
from .priors import Prior, ScaleDist
from .scalar import EstimatorSpec
from .solver import NoiseLevels, ProblemConfig, QuadratureSpec

__all__ = [
    "EstimatorSpec",
    "NoiseLevels",
    "Prior",
    "ProblemConfig",
    "QuadratureSpec",
    "ReplicaPrediction",
    "ScaleDist",
    "SupportRule",
    "predict",
]
__version__ = "0.1.0"
