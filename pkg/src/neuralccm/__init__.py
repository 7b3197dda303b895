"""Jointly learned contraction metrics and tracking controllers.

Submodules: ``linalg`` (small dense kernels), ``diffnet`` (reverse-mode
autodiff and two-layer nets), ``dynamics`` (benchmark systems),
``certloss`` (metric, controller, contraction risk), ``train``,
``simeval`` (references, rollouts, scores), ``verify`` (Lipschitz
constants, grid certificates, tube bounds), ``modelio`` and ``cli``.
"""
from .certloss import ControllerNet, LossConfig, MetricNet, empirical_risk
from .dynamics import BENCHMARKS, Box, make_benchmark, make_system
from .modelio import SavedModel, load_model, save_model
from .train import TrainConfig, pointwise_accuracy, sample_dataset

__version__ = "0.1.0"

__all__ = [
    "BENCHMARKS", "Box", "ControllerNet", "LossConfig", "MetricNet", "SavedModel", "TrainConfig",
    "empirical_risk", "load_model", "make_benchmark", "make_system", "pointwise_accuracy",
    "sample_dataset", "save_model",
]
