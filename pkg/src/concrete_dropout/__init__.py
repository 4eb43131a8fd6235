"""Concrete dropout: learned per-layer drop probabilities through a continuous relaxation."""

__version__ = "0.1.0"

from .errors import ConcreteDropoutError
from .layers import ConcreteDropoutLayer, DenseLayer, MLP, build_mlp
from .ndcore import RngStream
from .objective import ObjectiveConfig, elbo_loss
from .train import TrainConfig, grad_check
from .uncertainty import calibration_curve, decompose, mc_predict

__all__ = [
    "ConcreteDropoutError",
    "ConcreteDropoutLayer",
    "DenseLayer",
    "MLP",
    "ObjectiveConfig",
    "RngStream",
    "TrainConfig",
    "build_mlp",
    "calibration_curve",
    "decompose",
    "elbo_loss",
    "grad_check",
    "mc_predict",
]
