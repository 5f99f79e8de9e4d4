"""Layer-redundancy experiments on a trained decoder.

Two modes mirror the motivating questions:

* direct_inference: take a trained model and score users from an
  intermediate layer's representation through the unchanged output head,
  with no retraining. No weights are touched.
* truncated_training: train fresh models of increasing depth under the
  standard recipe and chart the diminishing returns.

``run_sweep`` emits one row per probed depth plus a row for the small
self-attention baseline whose embeddings seed every model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SplitDataset
from .errors import ConfigError
from .metrics import MetricsReport, evaluate_model
from .model import DecoderModel, ModelConfig, parameter_count
from .training import TrainSettings, pretrain_id_embeddings, train_model

log = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "l", "mode", "HR@1", "HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR",
    "params", "train_hours", "infer_hours",
)


@dataclass
class SweepSpec:
    layers: list[int]
    mode: str = "truncated_training"  # or "direct_inference"
    teacher_ckpt: str | Path | None = None
    seeds: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if self.mode not in ("truncated_training", "direct_inference"):
            raise ConfigError(f"unknown sweep mode {self.mode!r}")
        if any(l < 1 for l in self.layers):
            raise ConfigError("layer counts must be positive")
        if self.mode == "direct_inference" and self.teacher_ckpt is None:
            raise ConfigError("direct_inference needs a trained checkpoint")


def direct_layer_inference(
    model: DecoderModel,
    split: SplitDataset,
    layer: int,
    which: str = "test",
    seed: int = 17,
    negatives: int = 999,
    batch_size: int = 256,
) -> MetricsReport:
    """Evaluate using layer ``layer``'s representation through the existing
    down-projection head. Read-only: the model is never mutated."""
    if not 0 < layer <= model.config.n_layers:
        raise ConfigError(
            f"probe layer {layer} outside 1..{model.config.n_layers}"
        )
    return evaluate_model(model, split, which, seed=seed, negatives=negatives,
                          batch_size=batch_size, layer=layer)


def train_truncated(
    layers: int,
    split: SplitDataset,
    base_config: ModelConfig,
    settings: TrainSettings,
    id_embedding: np.ndarray,
    which: str = "test",
) -> tuple[DecoderModel, MetricsReport, dict]:
    """Fresh ``layers``-deep model under the standard recipe; returns the
    trained model, its metrics, and timing info."""
    config = base_config.with_layers(layers)
    model = DecoderModel.init(config, seed=settings.seed, id_embedding=id_embedding)
    result = train_model(model, split, settings)
    t0 = time.perf_counter()
    report = evaluate_model(model, split, which, seed=settings.eval_seed,
                            negatives=settings.eval_negatives,
                            batch_size=settings.eval_batch_size)
    infer_s = time.perf_counter() - t0
    timing = {"train_s": result.train_s, "infer_s": infer_s,
              "avg_step_s": result.avg_step_s}
    return model, report, timing


def _row(layer: int, mode: str, report: MetricsReport, params: int,
         train_s: float, infer_s: float) -> dict:
    return {
        "l": layer,
        "mode": mode,
        "HR@1": report.hr1,
        "HR@5": report.hr5,
        "HR@10": report.hr10,
        "NDCG@5": report.ndcg5,
        "NDCG@10": report.ndcg10,
        "MRR": report.mrr,
        "params": params,
        "train_hours": train_s / 3600.0,
        "infer_hours": infer_s / 3600.0,
    }


def run_sweep(
    spec: SweepSpec,
    split: SplitDataset,
    base_config: ModelConfig,
    settings: TrainSettings,
    pretrain_settings: TrainSettings | None = None,
    pretrain_layers: int = 2,
    pretrain_heads: int = 2,
    teacher: DecoderModel | None = None,
    which: str = "test",
) -> list[dict]:
    """One row per probed depth plus the baseline row, ready for sweep.csv."""
    rows: list[dict] = []

    t0 = time.perf_counter()
    table, _, baseline_test = pretrain_id_embeddings(
        split, base_config.seq_len, id_dim=base_config.id_dim,
        n_layers=pretrain_layers, heads=pretrain_heads,
        settings=pretrain_settings, seed=settings.seed,
    )
    baseline_s = time.perf_counter() - t0
    baseline_params = parameter_count(
        ModelConfig(n_items=split.n_items, n_layers=pretrain_layers,
                    hidden=base_config.id_dim, heads=pretrain_heads,
                    id_dim=base_config.id_dim, prefix_len=0,
                    seq_len=base_config.seq_len, freeze_id_embedding=False)
    )
    rows.append(_row(pretrain_layers, "baseline", baseline_test,
                     baseline_params, baseline_s, 0.0))

    if spec.mode == "direct_inference":
        if teacher is None:
            raise ConfigError("direct_inference sweep needs the trained model")
        for layer in spec.layers:
            t1 = time.perf_counter()
            report = direct_layer_inference(
                teacher, split, layer, which=which, seed=settings.eval_seed,
                negatives=settings.eval_negatives,
                batch_size=settings.eval_batch_size,
            )
            infer_s = time.perf_counter() - t1
            partial = parameter_count(teacher.config.with_layers(layer))
            rows.append(_row(layer, "direct_inference", report, partial, 0.0, infer_s))
            log.info("direct inference at layer %d: MRR %.4f", layer, report.mrr)
    else:
        for layer in spec.layers:
            try:
                _, report, timing = train_truncated(
                    layer, split, base_config, settings, table, which=which
                )
            except Exception as exc:  # a diverged entry should not kill the sweep
                log.error("truncated model with %d layers failed: %s", layer, exc)
                continue
            params = parameter_count(base_config.with_layers(layer))
            rows.append(_row(layer, "truncated_training", report, params,
                             timing["train_s"], timing["infer_s"]))
            log.info("truncated training with %d layers: MRR %.4f", layer, report.mrr)
    return rows
