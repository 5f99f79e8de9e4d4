"""Desk-scale sequential recommendation with block-wise feature distillation."""

from ._malloc import tune_malloc

tune_malloc()

from .data import SplitDataset, build_dataset, generate_synthetic, load_split, save_split
from .distill import BlockMap, DistillConfig, Distiller, make_block_map
from .estimators import DistilledRecommender, TeacherRecommender
from .metrics import MetricsReport, evaluate_model, select_best_checkpoint
from .model import DecoderModel, ModelConfig
from .training import TrainSettings, pretrain_id_embeddings, train_model

__version__ = "0.1.0"

__all__ = [
    "BlockMap",
    "DecoderModel",
    "DistillConfig",
    "DistilledRecommender",
    "Distiller",
    "MetricsReport",
    "ModelConfig",
    "SplitDataset",
    "TeacherRecommender",
    "TrainSettings",
    "build_dataset",
    "evaluate_model",
    "generate_synthetic",
    "load_split",
    "make_block_map",
    "pretrain_id_embeddings",
    "save_split",
    "select_best_checkpoint",
    "train_model",
]
