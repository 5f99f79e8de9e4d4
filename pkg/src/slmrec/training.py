"""Shared training loop: next-item cross-entropy, optional distillation
terms, periodic validation with checkpointing, and best-MRR selection.

The same loop drives the teacher, the plain student baseline, and both
distillation modes, which is what makes the lambda=0 reduction an exact
step-for-step identity rather than an approximation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import SplitDataset, make_batches
from .errors import TrainingError
from .metrics import MetricsReport, evaluate_model
from .model import DecoderModel, ModelConfig
from .optim import AdamW

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "ce", "one_minus_dcos", "dnorm", "lms", "total", "lr")


@dataclass
class TrainSettings:
    batch_size: int = 64
    max_steps: int = 300
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    warmup_steps: int = 30
    eval_steps: int = 100
    seed: int = 0
    eval_negatives: int = 999
    eval_seed: int = 17
    eval_batch_size: int = 256


@dataclass
class TrainResult:
    history: list[dict]
    best_step: int
    best_valid_mrr: float
    best_path: Path | None
    checkpoints: list[Path] = field(default_factory=list)
    eval_reports: dict[int, MetricsReport] = field(default_factory=dict)
    avg_step_s: float = 0.0
    setup_s: float = 0.0
    train_s: float = 0.0
    eval_s: float = 0.0


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 0xBA7C, epoch]).generate_state(1)[0])


def _zero_pad_row_grad(model: DecoderModel) -> None:
    emb = model.params["id_embedding"]
    if emb.requires_grad and emb.grad is not None:
        emb.grad[0] = 0.0


def compute_loss(model: DecoderModel, batch, distiller=None):
    """Backward root tensor plus per-component floats for the step log.

    With a distiller the root may include the teacher's own objective
    (online mode); the logged ``total`` is always the student's composite
    objective alone.
    """
    trace = model.forward(batch.ids, batch.mask)
    rep = model.user_representation(trace)
    scores = model.score_items(rep)
    ce = ad.cross_entropy(scores, batch.labels)
    components = {"ce": ce.item(), "one_minus_dcos": 0.0, "dnorm": 0.0, "lms": 0.0}
    root = ce
    if distiller is not None:
        root, kd_parts = distiller.build(ce, trace, batch)
        components.update(kd_parts)
    else:
        components["total"] = ce.item()
    return root, components


def train_step(model: DecoderModel, batch, optimizer: AdamW, distiller=None) -> dict:
    """One optimization step; returns the logged loss components."""
    optimizer.zero_grad()
    if distiller is not None:
        distiller.zero_grad()
    try:
        root, components = compute_loss(model, batch, distiller)
    except FloatingPointError as exc:
        raise TrainingError(
            f"non-finite loss at step {optimizer.state.step_count + 1}: {exc}"
        ) from exc
    if not np.isfinite(components["total"]):
        raise TrainingError(
            f"non-finite loss at step {optimizer.state.step_count + 1}"
        )
    root.backward()
    _zero_pad_row_grad(model)
    components["lr"] = optimizer.step()
    if distiller is not None:
        distiller.post_step()
    return components


def train_model(
    model: DecoderModel,
    split: SplitDataset,
    settings: TrainSettings,
    out_dir: str | Path | None = None,
    distiller=None,
    ckpt_prefix: str = "model",
    extra_step=None,
) -> TrainResult:
    """Run ``max_steps`` updates with periodic validation.

    Checkpoints are written as ``{prefix}_step{n}.ckpt`` after every
    evaluation; the weights of the best validation-MRR checkpoint (ties:
    latest) are reloaded into ``model`` before returning.

    Per-primitive finite checks are suspended inside the loop (they cost a
    full memory pass per op); divergence is still caught every step through
    the loss scalar and the optimizer's gradient check.
    """
    setup_start = time.perf_counter()
    params = dict(model.trainable())
    if distiller is not None:
        params.update(distiller.trainable())
    optimizer = AdamW(
        params,
        lr=settings.lr,
        beta1=settings.beta1,
        beta2=settings.beta2,
        eps=settings.adam_eps,
        weight_decay=settings.weight_decay,
        max_grad_norm=settings.max_grad_norm,
        warmup_steps=settings.warmup_steps,
        total_steps=settings.max_steps,
    )
    if distiller is not None:
        distiller.prepare(split, settings)
    setup_s = time.perf_counter() - setup_start

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    result = TrainResult(history=[], best_step=-1, best_valid_mrr=-1.0, best_path=None,
                         setup_s=setup_s)
    best_arrays = None
    step = 0
    epoch = 0
    train_s = 0.0
    eval_s = 0.0

    checks_were_on = ad.check_finite_enabled()
    ad.set_check_finite(False)
    try:
        while step < settings.max_steps:
            batches = make_batches(
                split, model.config.seq_len, settings.batch_size,
                shuffle_seed=epoch_seed(settings.seed, epoch), which="train",
            )
            for batch in batches:
                if step >= settings.max_steps:
                    break
                t0 = time.perf_counter()
                components = train_step(model, batch, optimizer, distiller)
                train_s += time.perf_counter() - t0
                step += 1
                components["step"] = step
                result.history.append(components)

                if step % settings.eval_steps == 0 or step == settings.max_steps:
                    t1 = time.perf_counter()
                    report = evaluate_model(
                        model, split, "valid", seed=settings.eval_seed,
                        negatives=settings.eval_negatives,
                        batch_size=settings.eval_batch_size,
                    )
                    eval_s += time.perf_counter() - t1
                    result.eval_reports[step] = report
                    log.info("step %d: valid MRR %.4f (loss %.4f)", step,
                             report.mrr, components["total"])
                    if out is not None:
                        path = out / f"{ckpt_prefix}_step{step}.ckpt"
                        tensors = model.to_arrays()
                        if distiller is not None:
                            tensors.update(distiller.to_arrays())
                        save_checkpoint(path, model.config.to_dict(), tensors)
                        result.checkpoints.append(path)
                    if report.mrr >= result.best_valid_mrr:
                        result.best_valid_mrr = report.mrr
                        result.best_step = step
                        result.best_path = (
                            out / f"{ckpt_prefix}_step{step}.ckpt" if out is not None else None
                        )
                        best_arrays = model.to_arrays()
                if extra_step is not None:
                    extra_step(step, components)
            epoch += 1
    finally:
        ad.set_check_finite(checks_were_on)

    if best_arrays is not None:
        for name, arr in best_arrays.items():
            model.params[name].data[...] = arr
    result.avg_step_s = train_s / max(step, 1)
    result.train_s = train_s
    result.eval_s = eval_s
    return result


def pretrain_id_embeddings(
    split: SplitDataset,
    seq_len: int,
    id_dim: int = 64,
    n_layers: int = 2,
    heads: int = 2,
    settings: TrainSettings | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, MetricsReport, MetricsReport]:
    """Train the small causal self-attention next-item baseline and return
    its item-embedding table plus its own valid/test metrics.

    The baseline shares the decoder machinery at width ``id_dim`` with a
    trainable embedding table and no prefix. Its metrics double as the
    reference curve for the pruning sweeps.
    """
    config = ModelConfig(
        n_items=split.n_items,
        n_layers=n_layers,
        hidden=id_dim,
        heads=heads,
        id_dim=id_dim,
        prefix_len=0,
        seq_len=seq_len,
        freeze_id_embedding=False,
    )
    settings = settings or TrainSettings(max_steps=200, lr=3e-3, batch_size=128,
                                         warmup_steps=20, eval_steps=100)
    settings = replace(settings, seed=seed)
    model = DecoderModel.init(config, seed=seed)
    train_model(model, split, settings, out_dir=None)
    valid = evaluate_model(model, split, "valid", seed=settings.eval_seed,
                           negatives=settings.eval_negatives,
                           batch_size=settings.eval_batch_size)
    test = evaluate_model(model, split, "test", seed=settings.eval_seed,
                          negatives=settings.eval_negatives,
                          batch_size=settings.eval_batch_size)
    table = model.params["id_embedding"].data.copy()
    table[0] = 0.0
    return table, valid, test
