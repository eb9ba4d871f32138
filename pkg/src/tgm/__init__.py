"""Temporal Gaussian Mixture layers for per-frame multi-label activity detection."""

from .data import (FeatureSequence, FrameLabels, SynthSpec, gen_synthetic, load_dataset,
                   load_features, load_labels, save_dataset, save_features, save_labels)
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .evaluation import average_precision, per_frame_map
from .kernel import KernelBank, build_kernel_bank, kernel_backward
from .layers import KernelSource, LayerConfig, LayerForm, TemporalLayer, param_count
from .model import (Classifier, ModelConfig, TgmModel, bce_loss, load_checkpoint,
                    save_checkpoint, stack_config)
from .train import AdamState, TrainPlan, adam_step, fit, grad_check, lr_for_epoch

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Classifier", "ConfigError", "FeatureSequence", "FormatError", "FrameLabels",
    "KernelBank", "KernelSource", "LayerConfig", "LayerForm", "ModelConfig", "NumericalError",
    "SynthSpec", "TemporalLayer", "TgmModel", "TrainPlan", "UsageError", "adam_step",
    "average_precision", "bce_loss", "build_kernel_bank", "fit", "gen_synthetic", "grad_check",
    "kernel_backward", "load_checkpoint", "load_dataset", "load_features", "load_labels",
    "lr_for_epoch", "param_count", "per_frame_map", "save_checkpoint", "save_dataset",
    "save_features", "save_labels", "stack_config",
]
