"""Ranking evaluation under the sampled-candidates protocol.

Each user's held-out item is ranked against k sampled negatives (999 by
default). Ties are broken pessimistically: the positive is placed after
every negative with an equal score, so constant-score models cannot
inflate their metrics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import SplitDataset, make_batches, sample_negatives
from .errors import EvaluationError
from .model import DecoderModel

log = logging.getLogger(__name__)


@dataclass
class RankedList:
    """Candidate order (descending score) and the positive's 1-based rank."""

    order: np.ndarray
    positive_rank: int


def rank_candidates(scores: np.ndarray, positive_index: int = 0) -> RankedList:
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("non-finite candidate score")
    pos = scores[positive_index]
    others = np.delete(scores, positive_index)
    rank = 1 + int((others > pos).sum()) + int((others == pos).sum())
    is_positive = np.zeros(len(scores), dtype=np.int8)
    is_positive[positive_index] = 1
    # lexsort: last key is primary. Sort by descending score, positives after
    # tied negatives.
    order = np.lexsort((is_positive, -scores))
    return RankedList(order=order, positive_rank=rank)


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def mrr_of_rank(rank: int) -> float:
    return 1.0 / rank


@dataclass
class MetricsReport:
    hr1: float
    hr5: float
    hr10: float
    ndcg5: float
    ndcg10: float
    mrr: float
    n_users: int
    seed: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not (self.hr1 <= self.hr5 + 1e-12 and self.hr5 <= self.hr10 + 1e-12):
            raise EvaluationError("HR@k must be nondecreasing in k")
        if self.ndcg5 > self.hr5 + 1e-12 or self.ndcg10 > self.hr10 + 1e-12:
            raise EvaluationError("NDCG@k cannot exceed HR@k")
        bound = self.hr1 + (1.0 - self.hr1) * 0.5
        if self.mrr > bound + 1e-12:
            raise EvaluationError("MRR exceeds its HR@1 bound")

    def to_dict(self) -> dict:
        return {
            "HR@1": self.hr1,
            "HR@5": self.hr5,
            "HR@10": self.hr10,
            "NDCG@5": self.ndcg5,
            "NDCG@10": self.ndcg10,
            "MRR": self.mrr,
            "n_users": self.n_users,
            "seed": self.seed,
            "config_hash": self.config_hash,
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self) -> str:
        head = f"{'metric':<8}{'value':>10}"
        rows = [
            ("HR@1", self.hr1), ("HR@5", self.hr5), ("HR@10", self.hr10),
            ("NDCG@5", self.ndcg5), ("NDCG@10", self.ndcg10), ("MRR", self.mrr),
        ]
        body = "\n".join(f"{name:<8}{value:>10.4f}" for name, value in rows)
        return f"{head}\n{body}\n(users={self.n_users}, seed={self.seed})"


def aggregate_ranks(ranks: list[int], seed: int, config_hash: str = "",
                    extra: dict | None = None) -> MetricsReport:
    arr = np.asarray(ranks, dtype=np.float64)
    report = MetricsReport(
        hr1=float(np.mean(arr <= 1)),
        hr5=float(np.mean(arr <= 5)),
        hr10=float(np.mean(arr <= 10)),
        ndcg5=float(np.mean([ndcg_at_k(r, 5) for r in ranks])),
        ndcg10=float(np.mean([ndcg_at_k(r, 10) for r in ranks])),
        mrr=float(np.mean(1.0 / arr)),
        n_users=len(ranks),
        seed=seed,
        config_hash=config_hash,
        extra=extra or {},
    )
    report.validate()
    return report


def evaluate_model(
    model: DecoderModel,
    split: SplitDataset,
    which: str = "valid",
    seed: int = 17,
    negatives: int = 999,
    batch_size: int = 256,
    layer: int | None = None,
    config_hash: str = "",
) -> MetricsReport:
    """Score every user's candidates and aggregate the ranking metrics.

    Deterministic for a fixed (seed, split, model): per-user candidate sets
    derive from (seed, user index) alone, so evaluation order and batching
    cannot change the outcome. Per-primitive finite checks are suspended
    for speed; non-finite scores still fail loudly in rank_candidates.
    """
    ranks: list[int] = []
    checks_were_on = ad.check_finite_enabled()
    ad.set_check_finite(False)
    try:
        with ad.no_grad():
            for batch in make_batches(split, model.config.seq_len, batch_size,
                                      which=which):
                scores = model.logits(batch.ids, batch.mask, layer=layer).data
                for row, user, label in zip(scores, batch.user_indices, batch.labels):
                    candidates = sample_negatives(split, int(user), int(label),
                                                  k=negatives, seed=seed)
                    ranked = rank_candidates(row[candidates], positive_index=0)
                    ranks.append(ranked.positive_rank)
    finally:
        ad.set_check_finite(checks_were_on)
    return aggregate_ranks(
        ranks, seed=seed, config_hash=config_hash,
        extra={"view": which, "negatives": negatives,
               **({"layer": layer} if layer is not None else {})},
    )


def select_best_checkpoint(
    ckpt_dir: str | Path,
    split: SplitDataset,
    seed: int = 17,
    negatives: int = 999,
    batch_size: int = 256,
) -> tuple[Path, float]:
    """Evaluate every checkpoint on the validation view; return the
    highest-MRR path, latest step winning ties. Unreadable checkpoints are
    skipped with a warning."""
    from .checkpoint import load_checkpoint
    from .errors import CheckpointError
    from .model import ModelConfig

    paths = sorted(Path(ckpt_dir).glob("*.ckpt"), key=_step_of)
    if not paths:
        raise EvaluationError(f"no checkpoints under {ckpt_dir}")
    best: tuple[float, int, Path] | None = None
    for i, path in enumerate(paths):
        try:
            raw_cfg, tensors = load_checkpoint(path)
            config = ModelConfig.from_dict(raw_cfg)
            model_tensors = {k: v for k, v in tensors.items() if not k.startswith("adapters.")}
            model = DecoderModel.from_tensors(config, model_tensors)
        except (CheckpointError, KeyError, ValueError) as exc:
            log.warning("skipping unreadable checkpoint %s: %s", path, exc)
            continue
        report = evaluate_model(model, split, "valid", seed=seed,
                                negatives=negatives, batch_size=batch_size)
        key = (report.mrr, i)
        if best is None or key >= (best[0], best[1]):
            best = (report.mrr, i, path)
    if best is None:
        raise EvaluationError(f"no readable checkpoints under {ckpt_dir}")
    return best[2], best[0]


def _step_of(path: Path) -> int:
    stem = path.stem
    digits = "".join(ch for ch in stem if ch.isdigit())
    return int(digits) if digits else 0
