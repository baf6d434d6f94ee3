"""Self-supervised cross-modal (point cloud + image) video pretraining at desk scale."""

__version__ = "0.1.0"

from .augment import AugmentConfig, AugmentationRecord, frame_correspondence, sample_augmentation
from .config import FinetuneConfig, TrainConfig, load_config
from .datagen import PairedSample, SceneSpec, generate_dataset, load_dataset, synth_scene
from .errors import CheckpointError, CrossVideoError, DatasetError, NumericalError, ValidationError
from .evaluation import MetricsReport, edit_score, evaluate, framewise_accuracy, mean_iou, segmental_f1, to_segments
from .model import CrossVideoModel, EmbeddingSet, EncoderConfig, build_model, load_checkpoint, save_checkpoint
from .objective import ContrastiveBatch, LossResult, total_loss
from .train import finetune_segmentation, lr_schedule, pretrain, subsample_split

__all__ = [
    "AugmentConfig",
    "AugmentationRecord",
    "CheckpointError",
    "ContrastiveBatch",
    "CrossVideoError",
    "CrossVideoModel",
    "DatasetError",
    "EmbeddingSet",
    "EncoderConfig",
    "FinetuneConfig",
    "LossResult",
    "MetricsReport",
    "NumericalError",
    "PairedSample",
    "SceneSpec",
    "TrainConfig",
    "ValidationError",
    "build_model",
    "edit_score",
    "evaluate",
    "finetune_segmentation",
    "frame_correspondence",
    "framewise_accuracy",
    "generate_dataset",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "lr_schedule",
    "mean_iou",
    "pretrain",
    "sample_augmentation",
    "save_checkpoint",
    "segmental_f1",
    "subsample_split",
    "synth_scene",
    "to_segments",
    "total_loss",
]
