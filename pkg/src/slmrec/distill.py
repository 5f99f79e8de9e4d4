"""Block-wise feature distillation.

Teacher layers are grouped in blocks of m, student layers in blocks of n,
with B = M/m = N/n. At the end of each block both models expose the hidden
state of the last real temporal position; the student is pulled toward
the teacher's features by a cosine-direction term and a squared-L2 term,
and its intermediate blocks (all but the final one) receive their own
cross-entropy supervision through small per-block adapters that score
against the frozen item table.

Offline mode keeps a fully trained teacher frozen; since its features for
a fixed training row never change, they are computed once and cached.
Online mode trains the teacher alongside the student on its own
cross-entropy objective, with teacher features detached from the student's
distillation terms unless configured otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .data import SplitDataset, build_sequence, train_cuts
from .errors import ConfigError
from .model import DecoderModel, ModelConfig, _truncated_normal
from .optim import AdamW

log = logging.getLogger(__name__)

COS_EPS = 1e-12  # keeps the cosine denominator finite; zero vectors score 0


@dataclass(frozen=True)
class BlockMap:
    teacher_layers: int
    student_layers: int
    blocks: int

    @property
    def m(self) -> int:
        return self.teacher_layers // self.blocks

    @property
    def n(self) -> int:
        return self.student_layers // self.blocks

    @property
    def teacher_taps(self) -> tuple[int, ...]:
        return tuple(self.m * k for k in range(1, self.blocks + 1))

    @property
    def student_taps(self) -> tuple[int, ...]:
        return tuple(self.n * k for k in range(1, self.blocks + 1))


def make_block_map(teacher_layers: int, student_layers: int, blocks: int) -> BlockMap:
    if blocks < 1:
        raise ConfigError("block count must be >= 1")
    if teacher_layers % blocks != 0:
        raise ConfigError(
            f"block count {blocks} does not divide teacher depth {teacher_layers}"
        )
    if student_layers % blocks != 0:
        raise ConfigError(
            f"block count {blocks} does not divide student depth {student_layers}"
        )
    return BlockMap(teacher_layers, student_layers, blocks)


@dataclass
class DistillConfig:
    blocks: int = 4
    lam_cos: float = 1.0
    lam_norm: float = 0.1
    lam_ms: float = 1.0
    mode: str = "offline"  # offline | online
    detach_teacher: bool = True
    cache_teacher_features: bool = True

    def __post_init__(self):
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"unknown distillation mode {self.mode!r}")
        if min(self.lam_cos, self.lam_norm, self.lam_ms) < 0:
            raise ConfigError("loss weights must be nonnegative")


# -- loss terms -----------------------------------------------------------


def d_cos(taps_teacher: list[Tensor], taps_student: list[Tensor]) -> Tensor:
    """Mean over blocks (and batch rows) of the feature cosine similarity."""
    total = None
    for ht, hs in zip(taps_teacher, taps_student):
        if float(np.min(np.sum(ht.data * ht.data, axis=-1))) < COS_EPS or \
           float(np.min(np.sum(hs.data * hs.data, axis=-1))) < COS_EPS:
            log.warning("zero-norm feature vector in cosine term; scoring it 0")
        dot = (ht * hs).sum(axis=-1)
        na = ((ht * ht).sum(axis=-1) + COS_EPS) ** 0.5
        nb = ((hs * hs).sum(axis=-1) + COS_EPS) ** 0.5
        cos = (dot / (na * nb)).mean()
        total = cos if total is None else total + cos
    return total * (1.0 / len(taps_teacher))


def d_norm(taps_teacher: list[Tensor], taps_student: list[Tensor]) -> Tensor:
    """Mean over blocks (and batch rows) of the squared L2 feature distance."""
    total = None
    for ht, hs in zip(taps_teacher, taps_student):
        diff = ht - hs
        sq = (diff * diff).sum(axis=-1).mean()
        total = sq if total is None else total + sq
    return total * (1.0 / len(taps_teacher))


def l_ms(
    taps_student: list[Tensor],
    adapters: dict[str, Tensor],
    labels: np.ndarray,
    id_embedding: Tensor,
) -> Tensor:
    """Per-block adapter cross-entropy over blocks 1..B-1.

    The final block is excluded so the prediction-stage representation is
    not constrained. With a single block there is nothing to supervise and
    the term is zero.
    """
    blocks = len(taps_student)
    if blocks < 2:
        log.warning("multi-supervision needs at least 2 blocks; returning 0")
        return Tensor(np.zeros((), dtype=taps_student[0].dtype))
    vocab = id_embedding.shape[0]
    pad_bias = np.zeros(vocab, dtype=id_embedding.dtype)
    pad_bias[0] = NEG_INF
    table_t = ad.transpose(id_embedding, (1, 0))
    total = None
    for k in range(1, blocks):
        down = ad.matmul(taps_student[k - 1], adapters[f"adapters.{k}"])
        scores = ad.add(ad.matmul(down, table_t), Tensor(pad_bias))
        ce = ad.cross_entropy(scores, labels)
        total = ce if total is None else total + ce
    return total * (1.0 / (blocks - 1))


def init_adapters(block_map: BlockMap, hidden: int, id_dim: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA7]))
    return {
        f"adapters.{k}": Tensor(
            _truncated_normal(rng, (hidden, id_dim), 0.02, np.float32), requires_grad=True
        )
        for k in range(1, block_map.blocks)
    }


# -- step-level driver -------------------------------------------------------


class Distiller:
    """Adds the distillation terms to the student's objective each step."""

    def __init__(
        self,
        teacher: DecoderModel,
        student: DecoderModel,
        block_map: BlockMap,
        cfg: DistillConfig,
        seed: int = 0,
    ):
        if teacher.config.hidden != student.config.hidden:
            raise ConfigError(
                f"teacher hidden {teacher.config.hidden} != student hidden "
                f"{student.config.hidden}; feature alignment requires equal widths"
            )
        if teacher.config.n_items != student.config.n_items:
            raise ConfigError("teacher and student must share the item vocabulary")
        if block_map.teacher_layers != teacher.config.n_layers:
            raise ConfigError("block map does not match teacher depth")
        if block_map.student_layers != student.config.n_layers:
            raise ConfigError("block map does not match student depth")
        self.teacher = teacher
        self.student = student
        self.block_map = block_map
        self.cfg = cfg
        self.adapters = init_adapters(block_map, student.config.hidden,
                                      student.config.id_dim, seed)
        self._cache: np.ndarray | None = None
        self._cache_index: dict[tuple[int, int], int] = {}
        self._teacher_opt: AdamW | None = None
        if cfg.mode == "offline":
            for p in teacher.params.values():
                p.requires_grad = False

    # -- trainer integration ------------------------------------------------

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.adapters)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.adapters.items()}

    def load_arrays(self, tensors: dict[str, np.ndarray]) -> None:
        for name in self.adapters:
            self.adapters[name].data[...] = tensors[name]

    def prepare(self, split: SplitDataset, settings) -> None:
        if self.cfg.mode == "online":
            self._teacher_opt = AdamW(
                self.teacher.trainable(),
                lr=settings.lr,
                beta1=settings.beta1,
                beta2=settings.beta2,
                eps=settings.adam_eps,
                weight_decay=settings.weight_decay,
                max_grad_norm=settings.max_grad_norm,
                warmup_steps=settings.warmup_steps,
                total_steps=settings.max_steps,
            )
        elif self.cfg.cache_teacher_features and self._needs_teacher_taps():
            self._build_cache(split, settings)

    def zero_grad(self) -> None:
        if self._teacher_opt is not None:
            self._teacher_opt.zero_grad()

    def post_step(self) -> None:
        if self._teacher_opt is not None:
            emb = self.teacher.params["id_embedding"]
            if emb.requires_grad and emb.grad is not None:
                emb.grad[0] = 0.0
            self._teacher_opt.step()

    # -- loss assembly --------------------------------------------------------

    def _needs_teacher_taps(self) -> bool:
        return self.cfg.lam_cos > 0 or self.cfg.lam_norm > 0

    def _needs_student_taps(self) -> bool:
        return self.cfg.lam_cos > 0 or self.cfg.lam_norm > 0 or self.cfg.lam_ms > 0

    def _build_cache(self, split: SplitDataset, settings) -> None:
        """Teacher tap features for every (user, prefix-cut) training row.

        The teacher is frozen, so its features for any fixed row never
        change; one batched pass over all prefixes removes the teacher
        forward from the per-step cost entirely.
        """
        seq_len = self.teacher.config.seq_len
        rows = []
        for u in range(split.n_users):
            for cut in train_cuts(split, u):
                rows.append((u, cut))
        self._cache_index = {key: i for i, key in enumerate(rows)}
        cache = np.zeros(
            (len(rows), self.block_map.blocks, self.teacher.config.hidden),
            dtype=np.float32,
        )
        # batch same-length prefixes together so pad cropping stays effective
        rows_sorted = sorted(range(len(rows)), key=lambda i: rows[i][1])
        chunk = settings.eval_batch_size
        with ad.no_grad():
            for start in range(0, len(rows_sorted), chunk):
                take = rows_sorted[start:start + chunk]
                ids = np.zeros((len(take), seq_len), dtype=np.int64)
                mask = np.zeros((len(take), seq_len), dtype=np.float32)
                for j, i in enumerate(take):
                    u, cut = rows[i]
                    ids[j], mask[j] = build_sequence(split.train[u][:cut], seq_len)
                trace = self.teacher.forward(ids, mask)
                for b, layer in enumerate(self.block_map.teacher_taps):
                    reps = self.teacher.user_representation(trace, layer).data
                    cache[take, b] = reps
        self._cache = cache

    def _teacher_taps(self, batch, teacher_trace=None) -> list[Tensor]:
        if teacher_trace is not None:
            taps = [
                self.teacher.user_representation(teacher_trace, layer)
                for layer in self.block_map.teacher_taps
            ]
            if self.cfg.detach_teacher:
                taps = [t.detach() for t in taps]
            return taps
        if self._cache is not None:
            idx = [
                self._cache_index[(int(u), int(n))]
                for u, n in zip(batch.user_indices, batch.lengths)
            ]
            block = self._cache[idx]
            return [Tensor(block[:, j]) for j in range(self.block_map.blocks)]
        with ad.no_grad():
            trace = self.teacher.forward(batch.ids, batch.mask)
            return [
                self.teacher.user_representation(trace, layer)
                for layer in self.block_map.teacher_taps
            ]

    def build(self, ce: Tensor, trace, batch) -> tuple[Tensor, dict]:
        """Student composite objective; online mode appends the teacher's
        own cross-entropy to the backward root."""
        parts = {"one_minus_dcos": 0.0, "dnorm": 0.0, "lms": 0.0}
        total = ce

        teacher_trace = None
        teacher_ce = None
        if self.cfg.mode == "online":
            teacher_trace = self.teacher.forward(batch.ids, batch.mask)
            t_rep = self.teacher.user_representation(teacher_trace)
            t_scores = self.teacher.score_items(t_rep)
            teacher_ce = ad.cross_entropy(t_scores, batch.labels)
            parts["teacher_ce"] = teacher_ce.item()

        if self._needs_student_taps():
            taps_s = [
                self.student.user_representation(trace, layer)
                for layer in self.block_map.student_taps
            ]
            if self._needs_teacher_taps():
                taps_t = self._teacher_taps(batch, teacher_trace)
            if self.cfg.lam_cos > 0:
                one_minus = 1.0 - d_cos(taps_t, taps_s)
                parts["one_minus_dcos"] = one_minus.item()
                total = total + one_minus * self.cfg.lam_cos
            if self.cfg.lam_norm > 0:
                dn = d_norm(taps_t, taps_s)
                parts["dnorm"] = dn.item()
                total = total + dn * self.cfg.lam_norm
            if self.cfg.lam_ms > 0:
                lm = l_ms(taps_s, self.adapters, batch.labels,
                          self.student.params["id_embedding"])
                parts["lms"] = lm.item()
                total = total + lm * self.cfg.lam_ms

        parts["total"] = total.item()
        root = total if teacher_ce is None else total + teacher_ce
        return root, parts


# -- run-level entry points -----------------------------------------------------


def derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def distill_offline(
    teacher: DecoderModel,
    student_config: ModelConfig,
    split: SplitDataset,
    dcfg: DistillConfig,
    settings,
    out_dir=None,
    id_embedding: np.ndarray | None = None,
):
    """Train a student against a frozen teacher; returns (student, distiller, result)."""
    from .training import train_model

    block_map = make_block_map(teacher.config.n_layers, student_config.n_layers, dcfg.blocks)
    if id_embedding is None:
        id_embedding = teacher.params["id_embedding"].data.copy()
    student = DecoderModel.init(student_config, seed=settings.seed, id_embedding=id_embedding)
    distiller = Distiller(teacher, student, block_map, dcfg, seed=settings.seed)
    before = {k: v.data.copy() for k, v in teacher.params.items()}
    result = train_model(student, split, settings, out_dir=out_dir,
                         distiller=distiller, ckpt_prefix="student")
    for name, arr in before.items():
        if not np.array_equal(arr, teacher.params[name].data):
            raise ConfigError(f"frozen teacher parameter {name!r} changed during distillation")
    return student, distiller, result


def distill_online(
    teacher_config: ModelConfig,
    student_config: ModelConfig,
    split: SplitDataset,
    dcfg: DistillConfig,
    settings,
    out_dir=None,
    id_embedding: np.ndarray | None = None,
):
    """Train teacher and student jointly; returns (teacher, student, distiller, result)."""
    from .training import train_model

    teacher = DecoderModel.init(
        teacher_config, seed=derive_seed(settings.seed, 0x7EA0), id_embedding=id_embedding
    )
    student = DecoderModel.init(student_config, seed=settings.seed, id_embedding=id_embedding)
    block_map = make_block_map(teacher_config.n_layers, student_config.n_layers, dcfg.blocks)
    distiller = Distiller(teacher, student, block_map, dcfg, seed=settings.seed)
    result = train_model(student, split, settings, out_dir=out_dir,
                         distiller=distiller, ckpt_prefix="student")
    return teacher, student, distiller, result
