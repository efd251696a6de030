"""Sub-region-aware modality attention and adaptive box prompting for
multi-modal brain tumor segmentation, at desk scale."""

from .attention import ModalityAttention, attend_and_fuse, attention_weights, energy, fuse
from .evaluation import (
    composite_masks,
    dice,
    evaluate_dataset,
    iou,
    kfold_split,
    wilcoxon_signed_rank,
)
from .model import FeatureMapSet, ModelConfig, PromptableSegmenter, build_model
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .prompting import Variant, combine_subregions, extract_bbox, two_pass_segment
from .training import Checkpoint, TrainConfig, train, train_new
from .volume_io import CaseArchive, MultiModalVolume, load_case, save_case

__version__ = "0.1.0"

__all__ = [
    "CaseArchive",
    "Checkpoint",
    "FeatureMapSet",
    "ModalityAttention",
    "ModelConfig",
    "MultiModalVolume",
    "PhantomSpec",
    "PromptableSegmenter",
    "TrainConfig",
    "Variant",
    "attend_and_fuse",
    "attention_weights",
    "build_model",
    "combine_subregions",
    "composite_masks",
    "dice",
    "energy",
    "evaluate_dataset",
    "extract_bbox",
    "fuse",
    "generate_dataset",
    "generate_phantom",
    "iou",
    "kfold_split",
    "load_case",
    "save_case",
    "train",
    "train_new",
    "two_pass_segment",
    "wilcoxon_signed_rank",
]
