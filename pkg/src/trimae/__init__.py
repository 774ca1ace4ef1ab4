"""trimae: tri-modal masked-autoencoder pretraining and attention-fused
ordinal staging for fundus / OCT / visual-field image triplets."""

from .data import (
    AugmentationPolicy,
    MissingnessConfig,
    MultimodalSample,
    SplitManifest,
    augment,
    build_missing_eval_set,
    generate_synthetic,
    sample_missingness,
    stratified_split,
)
from .encoder import EncoderConfig, TriEncoder
from .errors import CheckpointError, ConfigError, DataError, NumericError, TrimaeError
from .mae import DecoderConfig, MaskedPretrainModel, apply_mask, make_mask, masked_mse
from .attention import CrossModalChannelAttention
from .classifier import StageClassifier, ce_loss, fuse
from .metrics import EvalReport, auroc_ovr, brier, confusion_metrics, ece, evaluate_predictions, kappa_quadratic
from .train import TrainConfig, evaluate_model, finetune, multi_seed, pretrain

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "CheckpointError",
    "ConfigError",
    "CrossModalChannelAttention",
    "DataError",
    "DecoderConfig",
    "EncoderConfig",
    "EvalReport",
    "MaskedPretrainModel",
    "MissingnessConfig",
    "MultimodalSample",
    "NumericError",
    "SplitManifest",
    "StageClassifier",
    "TrainConfig",
    "TriEncoder",
    "TrimaeError",
    "apply_mask",
    "augment",
    "auroc_ovr",
    "brier",
    "build_missing_eval_set",
    "ce_loss",
    "confusion_metrics",
    "ece",
    "evaluate_model",
    "evaluate_predictions",
    "finetune",
    "fuse",
    "generate_synthetic",
    "kappa_quadratic",
    "make_mask",
    "masked_mse",
    "multi_seed",
    "pretrain",
    "sample_missingness",
    "stratified_split",
]
