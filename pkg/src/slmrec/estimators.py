"""Scikit-learn style estimators over the trainers.

Both estimators follow the usual contract: constructors only store
hyperparameters (so ``get_params``/``set_params``/``clone`` work), ``fit``
does the training and sets trailing-underscore attributes, and ``score``
returns validation MRR so the models compose with standard model
selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .data import SplitDataset, build_sequence
from .distill import DistillConfig, Distiller, distill_offline, distill_online
from .errors import ConfigError
from .metrics import MetricsReport, evaluate_model
from .model import DecoderModel, ModelConfig
from .training import TrainSettings, pretrain_id_embeddings, train_model
from .validation import check_fitted, check_histories, check_split


class _RecommenderMixin:
    """Prediction surface shared by the fitted estimators."""

    model_: DecoderModel | None

    def predict_scores(self, histories) -> np.ndarray:
        """Score every item for each interaction history; pad column is -inf."""
        check_fitted(self)
        model = self.model_
        rows = check_histories(histories, model.config.n_items)
        ids = np.zeros((len(rows), model.config.seq_len), dtype=np.int64)
        mask = np.zeros((len(rows), model.config.seq_len), dtype=np.float32)
        for i, history in enumerate(rows):
            ids[i], mask[i] = build_sequence(history, model.config.seq_len)
        with ad.no_grad():
            return model.logits(ids, mask).data.copy()

    def predict(self, histories, top_k: int = 10) -> np.ndarray:
        """Top-k next-item indices per history, best first."""
        scores = self.predict_scores(histories)
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :top_k]

    def evaluate(self, split: SplitDataset, which: str = "test") -> MetricsReport:
        check_fitted(self)
        check_split(split)
        return evaluate_model(
            self.model_, split, which,
            seed=self.eval_seed, negatives=self.eval_negatives,
            batch_size=self.eval_batch_size,
        )

    def score(self, split: SplitDataset, y=None) -> float:
        """Validation MRR, for use with model-selection utilities."""
        return self.evaluate(split, which="valid").mrr


class TeacherRecommender(_RecommenderMixin, BaseEstimator):
    """Plain next-item decoder trained on cross-entropy over all items.

    Also used for the lambda=0 student baseline by passing fewer layers.
    """

    def __init__(
        self,
        n_layers: int = 8,
        hidden: int = 256,
        heads: int = 4,
        id_dim: int = 64,
        prefix_len: int = 4,
        seq_len: int = 50,
        batch_size: int = 64,
        max_steps: int = 300,
        lr: float = 1e-3,
        warmup_steps: int = 30,
        weight_decay: float = 0.01,
        max_grad_norm: float = 1.0,
        eval_steps: int = 100,
        pretrain_steps: int = 200,
        eval_negatives: int = 999,
        eval_seed: int = 17,
        eval_batch_size: int = 256,
        seed: int = 0,
    ):
        self.n_layers = n_layers
        self.hidden = hidden
        self.heads = heads
        self.id_dim = id_dim
        self.prefix_len = prefix_len
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.eval_steps = eval_steps
        self.pretrain_steps = pretrain_steps
        self.eval_negatives = eval_negatives
        self.eval_seed = eval_seed
        self.eval_batch_size = eval_batch_size
        self.seed = seed
        self.model_ = None

    def _settings(self) -> TrainSettings:
        return TrainSettings(
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            lr=self.lr,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
            warmup_steps=self.warmup_steps,
            eval_steps=self.eval_steps,
            seed=self.seed,
            eval_negatives=self.eval_negatives,
            eval_seed=self.eval_seed,
            eval_batch_size=self.eval_batch_size,
        )

    def fit(self, split: SplitDataset, y=None, id_embedding: np.ndarray | None = None):
        check_split(split)
        config = ModelConfig(
            n_items=split.n_items,
            n_layers=self.n_layers,
            hidden=self.hidden,
            heads=self.heads,
            id_dim=self.id_dim,
            prefix_len=self.prefix_len,
            seq_len=self.seq_len,
        )
        if id_embedding is None:
            id_embedding, self.baseline_valid_, self.baseline_test_ = pretrain_id_embeddings(
                split, self.seq_len, id_dim=self.id_dim,
                settings=TrainSettings(max_steps=self.pretrain_steps, lr=3e-3,
                                       batch_size=128, warmup_steps=20,
                                       eval_steps=max(self.pretrain_steps, 1),
                                       eval_negatives=self.eval_negatives,
                                       eval_seed=self.eval_seed,
                                       eval_batch_size=self.eval_batch_size),
                seed=self.seed,
            )
        self.id_embedding_ = np.asarray(id_embedding, dtype=np.float32)
        self.model_ = DecoderModel.init(config, seed=self.seed,
                                        id_embedding=self.id_embedding_)
        self.result_ = train_model(self.model_, split, self._settings())
        self.valid_report_ = self.result_.eval_reports[self.result_.best_step]
        return self


class DistilledRecommender(_RecommenderMixin, BaseEstimator):
    """Shallow decoder trained under the composite distillation objective.

    ``teacher`` may be a fitted TeacherRecommender or a DecoderModel
    (offline mode); online mode builds and trains its own teacher of
    ``teacher_layers`` depth alongside the student.
    """

    def __init__(
        self,
        teacher=None,
        n_layers: int = 4,
        teacher_layers: int = 8,
        blocks: int = 4,
        lam_cos: float = 1.0,
        lam_norm: float = 0.1,
        lam_ms: float = 1.0,
        mode: str = "offline",
        detach_teacher: bool = True,
        cache_teacher_features: bool = True,
        batch_size: int = 64,
        max_steps: int = 300,
        lr: float = 1e-3,
        warmup_steps: int = 30,
        weight_decay: float = 0.01,
        max_grad_norm: float = 1.0,
        eval_steps: int = 100,
        eval_negatives: int = 999,
        eval_seed: int = 17,
        eval_batch_size: int = 256,
        seed: int = 0,
    ):
        self.teacher = teacher
        self.n_layers = n_layers
        self.teacher_layers = teacher_layers
        self.blocks = blocks
        self.lam_cos = lam_cos
        self.lam_norm = lam_norm
        self.lam_ms = lam_ms
        self.mode = mode
        self.detach_teacher = detach_teacher
        self.cache_teacher_features = cache_teacher_features
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.eval_steps = eval_steps
        self.eval_negatives = eval_negatives
        self.eval_seed = eval_seed
        self.eval_batch_size = eval_batch_size
        self.seed = seed
        self.model_ = None

    def _settings(self) -> TrainSettings:
        return TrainSettings(
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            lr=self.lr,
            weight_decay=self.weight_decay,
            max_grad_norm=self.max_grad_norm,
            warmup_steps=self.warmup_steps,
            eval_steps=self.eval_steps,
            seed=self.seed,
            eval_negatives=self.eval_negatives,
            eval_seed=self.eval_seed,
            eval_batch_size=self.eval_batch_size,
        )

    def _distill_config(self) -> DistillConfig:
        return DistillConfig(
            blocks=self.blocks,
            lam_cos=self.lam_cos,
            lam_norm=self.lam_norm,
            lam_ms=self.lam_ms,
            mode=self.mode,
            detach_teacher=self.detach_teacher,
            cache_teacher_features=self.cache_teacher_features,
        )

    def _resolve_teacher(self) -> DecoderModel:
        teacher = self.teacher
        if isinstance(teacher, TeacherRecommender):
            check_fitted(teacher)
            teacher = teacher.model_
        if not isinstance(teacher, DecoderModel):
            raise ConfigError(
                "offline distillation needs a fitted TeacherRecommender or a "
                "DecoderModel as `teacher`"
            )
        return teacher

    def fit(self, split: SplitDataset, y=None, id_embedding: np.ndarray | None = None):
        check_split(split)
        dcfg = self._distill_config()
        settings = self._settings()
        if self.mode == "offline":
            teacher = self._resolve_teacher()
            student_config = teacher.config.with_layers(self.n_layers)
            student, distiller, result = distill_offline(
                teacher, student_config, split, dcfg, settings,
                id_embedding=id_embedding,
            )
            self.teacher_model_ = teacher
        else:
            base = ModelConfig(n_items=split.n_items, n_layers=self.teacher_layers)
            if id_embedding is None and isinstance(self.teacher, TeacherRecommender):
                id_embedding = getattr(self.teacher, "id_embedding_", None)
            if id_embedding is None:
                id_embedding, _, _ = pretrain_id_embeddings(
                    split, base.seq_len, id_dim=base.id_dim, seed=self.seed
                )
            teacher_config = base
            student_config = base.with_layers(self.n_layers)
            teacher, student, distiller, result = distill_online(
                teacher_config, student_config, split, dcfg, settings,
                id_embedding=id_embedding,
            )
            self.teacher_model_ = teacher
        self.model_ = student
        self.distiller_: Distiller = distiller
        self.result_ = result
        self.valid_report_ = result.eval_reports[result.best_step]
        return self
