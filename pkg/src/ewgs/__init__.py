"""Quantization-aware training with element-wise gradient scaling, on a small numpy autodiff engine."""

from .autodiff import Tensor, backward, no_grad
from .config import ConfigError, ExperimentConfig
from .data import Dataset, load_mnist, make_two_moons
from .layers import Model, ModelSpec, build_model, cnn_spec, mlp_spec
from .quantizer import FULL_PRECISION, Mode, QuantizerParams, quantize_forward
from .scaling import GMode, HessianProbeReport, delta_update_pass
from .training import DeltaMode, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad",
    "ConfigError", "ExperimentConfig",
    "Dataset", "load_mnist", "make_two_moons",
    "Model", "ModelSpec", "build_model", "cnn_spec", "mlp_spec",
    "FULL_PRECISION", "Mode", "QuantizerParams", "quantize_forward",
    "GMode", "HessianProbeReport", "delta_update_pass",
    "DeltaMode", "TrainConfig", "Trainer", "train",
]
