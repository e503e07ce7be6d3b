"""Noise-robust 1-D CNN ECG classification.

A float64 reverse-mode autograd engine, a masked variable-length ECG
network, L-infinity PGD and white-noise perturbations, three defenses
(adversarial training, Jacobian regularization, NSR regularization) and
noise-sweep evaluation with CSV/SVG reports.
"""

from .attacks import AttackConfig, pgd_attack, uniform_noise
from .defenses import TrainConfig, train
from .errors import (
    IngestionError,
    InputError,
    NumericError,
    ParameterError,
    RobustEcgError,
    UsageError,
)
from .evaluate import SweepReport, accuracy, macro_f1, noise_sweep
from .model import EcgNet, EcgNetConfig, MaskedBatch, build_ecgnet

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "EcgNet",
    "EcgNetConfig",
    "IngestionError",
    "InputError",
    "MaskedBatch",
    "NumericError",
    "ParameterError",
    "RobustEcgError",
    "SweepReport",
    "TrainConfig",
    "UsageError",
    "accuracy",
    "build_ecgnet",
    "macro_f1",
    "noise_sweep",
    "pgd_attack",
    "train",
    "uniform_noise",
]
