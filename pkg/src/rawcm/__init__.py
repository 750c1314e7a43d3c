"""Raw-waveform audio anti-spoofing: from-scratch differentiable kernels,
a revised ConvNeXt-style network with channel attention, focal-loss training,
and EER / min t-DCF evaluation."""

from .tensor import Tensor, Tape, backward, grad_check, tensor_new
from .model import Model, ModelConfig, meca_kernel_size
from .metrics import (FocalLossConfig, LabeledScore, TdcfParams, compute_eer,
                      focal_loss, min_tdcf, per_attack_breakdown)
from .training import TrainConfig, train, save_checkpoint, load_checkpoint
from .estimator import SpoofDetector

__all__ = [
    "Tensor", "Tape", "backward", "grad_check", "tensor_new",
    "Model", "ModelConfig", "meca_kernel_size",
    "FocalLossConfig", "LabeledScore", "TdcfParams",
    "compute_eer", "focal_loss", "min_tdcf", "per_attack_breakdown",
    "TrainConfig", "train", "save_checkpoint", "load_checkpoint",
    "SpoofDetector",
]

__version__ = "0.1.0"
