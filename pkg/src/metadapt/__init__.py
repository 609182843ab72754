"""Guided domain adaptation for image classifiers on a small numpy autodiff core."""

from .autodiff import ContractViolation, ParameterSet, Tensor
from .evaluation import (
    evaluate,
    forgetting_report,
    generate_synthetic_benchmark,
    robustness_report,
)
from .imaging import CalibrationProfile, build_calibration_profile
from .losses import GuidedLossConfig
from .metadomain import LabeledDataset, read_manifest, read_manifests
from .model import Checkpoint, EncoderConfig
from .training import TrainConfig, ct_pretrain, guided_tune, train_supervised

__all__ = [
    "CalibrationProfile",
    "Checkpoint",
    "ContractViolation",
    "EncoderConfig",
    "GuidedLossConfig",
    "LabeledDataset",
    "ParameterSet",
    "Tensor",
    "TrainConfig",
    "build_calibration_profile",
    "ct_pretrain",
    "evaluate",
    "forgetting_report",
    "generate_synthetic_benchmark",
    "guided_tune",
    "read_manifest",
    "read_manifests",
    "robustness_report",
    "train_supervised",
]
