"""Miniature decoder-only recommender.

Structure: frozen (or trainable) item-ID embeddings at width ``id_dim``,
a learned up-projection to the decoder width, ``prefix_len`` learned
prefix rows standing in for a prompt, a stack of pre-norm rotary-attention
blocks with gated feed-forwards, and a down-projection back to ``id_dim``
whose output is dot-scored against the item table. Every layer's hidden
state is retained so callers can tap intermediate user representations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Tensor
from .errors import ConfigError, DimensionError


def default_ffn_dim(hidden: int) -> int:
    """Gated feed-forward width: 4*hidden*2/3 rounded to a multiple of 8."""
    return max(8, int(round(4 * hidden * 2 / 3 / 8)) * 8)


@dataclass(frozen=True)
class ModelConfig:
    n_items: int
    n_layers: int
    hidden: int = 256
    heads: int = 4
    id_dim: int = 64
    prefix_len: int = 4
    seq_len: int = 50
    ffn_hidden: int = 0  # 0 = derive from hidden
    freeze_id_embedding: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if (self.hidden // self.heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary encoding")
        if self.prefix_len < 0 or self.seq_len < 1 or self.n_items < 1:
            raise ConfigError("prefix_len >= 0, seq_len >= 1, n_items >= 1 required")

    @property
    def vocab(self) -> int:
        return self.n_items + 1  # index 0 is padding

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else default_ffn_dim(self.hidden)

    def with_layers(self, n_layers: int) -> "ModelConfig":
        return replace(self, n_layers=n_layers)

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "n_layers": self.n_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "id_dim": self.id_dim,
            "prefix_len": self.prefix_len,
            "seq_len": self.seq_len,
            "ffn_hidden": self.ffn_hidden,
            "freeze_id_embedding": self.freeze_id_embedding,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        ints = {
            k: int(raw[k])
            for k in ("n_items", "n_layers", "hidden", "heads", "id_dim",
                      "prefix_len", "seq_len", "ffn_hidden")
        }
        freeze = str(raw.get("freeze_id_embedding", "True")).lower() in ("true", "1")
        return cls(freeze_id_embedding=freeze, **ints)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; must agree with the built model."""
    d0, d1, dff = config.id_dim, config.hidden, config.ffn_dim
    per_layer = 4 * d1 * d1 + 3 * d1 * dff + 2 * d1
    return (
        config.vocab * d0          # item table
        + d0 * d1                  # up projection
        + config.prefix_len * d1   # prefix rows
        + config.n_layers * per_layer
        + d1 * d0                  # down projection
    )


@dataclass
class ForwardTrace:
    """Hidden states of layers 0..L plus bookkeeping for tap extraction."""

    hidden: list[Tensor]
    last_index: np.ndarray   # (B,) last real position per row
    full_mask: np.ndarray    # (B, S) prefix + item mask after cropping

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


def _truncated_normal(rng: np.random.Generator, shape, sigma: float, dtype) -> np.ndarray:
    w = rng.normal(scale=sigma, size=shape)
    np.clip(w, -2 * sigma, 2 * sigma, out=w)
    return w.astype(dtype)


class DecoderModel:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        seed: int,
        id_embedding: np.ndarray | None = None,
        dtype=np.float32,
    ) -> "DecoderModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0DE1]))
        sigma = 0.02
        params: dict[str, Tensor] = {}

        # Always consume the table draw so the remaining weights are
        # identical for a given seed whether or not a pretrained table is
        # supplied (the plain-vs-distilled reduction identity relies on it).
        table = _truncated_normal(rng, (config.vocab, config.id_dim), sigma, dtype)
        if id_embedding is not None:
            provided = np.array(id_embedding, dtype=dtype)
            if provided.shape != (config.vocab, config.id_dim):
                raise DimensionError(
                    f"id embedding shape {provided.shape} != {(config.vocab, config.id_dim)}"
                )
            table = provided
        table[0] = 0.0  # pad row stays zero
        params["id_embedding"] = Tensor(table, requires_grad=not config.freeze_id_embedding)

        params["up_proj"] = Tensor(
            _truncated_normal(rng, (config.id_dim, config.hidden), sigma, dtype),
            requires_grad=True,
        )
        if config.prefix_len > 0:
            params["prefix"] = Tensor(
                _truncated_normal(rng, (config.prefix_len, config.hidden), sigma, dtype),
                requires_grad=True,
            )
        d1, dff = config.hidden, config.ffn_dim
        for i in range(config.n_layers):
            base = f"layers.{i}."
            params[base + "attn_norm"] = Tensor(np.ones(d1, dtype=dtype), requires_grad=True)
            for name in ("wq", "wk", "wv", "wo"):
                params[base + name] = Tensor(
                    _truncated_normal(rng, (d1, d1), sigma, dtype), requires_grad=True
                )
            params[base + "ffn_norm"] = Tensor(np.ones(d1, dtype=dtype), requires_grad=True)
            params[base + "w_gate"] = Tensor(
                _truncated_normal(rng, (d1, dff), sigma, dtype), requires_grad=True
            )
            params[base + "w_up"] = Tensor(
                _truncated_normal(rng, (d1, dff), sigma, dtype), requires_grad=True
            )
            params[base + "w_down"] = Tensor(
                _truncated_normal(rng, (dff, d1), sigma, dtype), requires_grad=True
            )
        params["down_proj"] = Tensor(
            _truncated_normal(rng, (d1, config.id_dim), sigma, dtype), requires_grad=True
        )
        return cls(config, params)

    @classmethod
    def from_tensors(
        cls, config: ModelConfig, tensors: dict[str, np.ndarray], trainable: bool = True
    ) -> "DecoderModel":
        params = {}
        for name, arr in tensors.items():
            requires = trainable and not (name == "id_embedding" and config.freeze_id_embedding)
            params[name] = Tensor(np.array(arr, dtype=np.float32), requires_grad=requires)
        return cls(config, params)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def trainable(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def embed(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Item embeddings, up-projected and prefixed; returns (x, full_mask)."""
        cfg = self.config
        dtype = self.params["up_proj"].dtype
        emb = ad.embedding(self.params["id_embedding"], ids)
        x = ad.matmul(emb, self.params["up_proj"])
        if cfg.prefix_len > 0:
            batch = ids.shape[0]
            zeros = Tensor(np.zeros((batch, cfg.prefix_len, cfg.hidden), dtype=dtype))
            prefix = ad.add(zeros, self.params["prefix"])
            x = ad.concat([prefix, x], axis=1)
        prefix_mask = np.ones((ids.shape[0], cfg.prefix_len), dtype=mask.dtype)
        full_mask = np.concatenate([prefix_mask, mask], axis=1)
        return x, full_mask

    def forward(self, ids: np.ndarray, mask: np.ndarray, crop_pad: bool = True) -> ForwardTrace:
        """Run all decoder blocks, retaining every layer's hidden state.

        ``crop_pad`` drops leading all-pad columns shared by the whole
        batch. Rotary scores depend only on position differences and pad
        keys are masked out, so this changes nothing but float rounding.
        """
        cfg = self.config
        if ids.shape[1] != mask.shape[1]:
            raise DimensionError("ids and mask disagree on sequence length")
        if crop_pad:
            keep = int(mask.sum(axis=1).max())
            keep = max(keep, 1)
            if keep < ids.shape[1]:
                ids = ids[:, -keep:]
                mask = mask[:, -keep:]

        x, full_mask = self.embed(ids, mask)
        batch, seq, _ = x.shape
        positions = np.arange(seq)
        bias = self._attention_bias(full_mask, x.dtype)
        scale = 1.0 / np.sqrt(cfg.head_dim)

        hidden = [x]
        for i in range(cfg.n_layers):
            base = f"layers.{i}."
            xn = ad.rms_norm(x, self.params[base + "attn_norm"])
            q = self._heads_view(ad.matmul(xn, self.params[base + "wq"]), batch, seq)
            k = self._heads_view(ad.matmul(xn, self.params[base + "wk"]), batch, seq)
            v = self._heads_view(ad.matmul(xn, self.params[base + "wv"]), batch, seq)
            q = ad.rope(q, positions)
            k = ad.rope(k, positions)
            scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * scale
            attn = ad.softmax(ad.add(scores, bias))
            ctx = ad.matmul(attn, v)
            merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.hidden))
            x = ad.add(x, ad.matmul(merged, self.params[base + "wo"]))

            xn2 = ad.rms_norm(x, self.params[base + "ffn_norm"])
            gate = ad.silu(ad.matmul(xn2, self.params[base + "w_gate"]))
            up = ad.matmul(xn2, self.params[base + "w_up"])
            x = ad.add(x, ad.matmul(ad.mul(gate, up), self.params[base + "w_down"]))
            hidden.append(x)

        real = full_mask > 0.5
        last_index = full_mask.shape[1] - 1 - np.argmax(real[:, ::-1], axis=1)
        return ForwardTrace(hidden=hidden, last_index=last_index, full_mask=full_mask)

    def _heads_view(self, t: Tensor, batch: int, seq: int) -> Tensor:
        cfg = self.config
        return ad.transpose(
            ad.reshape(t, (batch, seq, cfg.heads, cfg.head_dim)), (0, 2, 1, 3)
        )

    def _attention_bias(self, full_mask: np.ndarray, dtype) -> Tensor:
        seq = full_mask.shape[1]
        causal = np.triu(np.full((seq, seq), NEG_INF, dtype=dtype), k=1)
        keypad = (1.0 - full_mask).astype(dtype) * NEG_INF
        bias = causal[None, None, :, :] + keypad[:, None, None, :]
        return Tensor(bias)

    # -- heads ----------------------------------------------------------------

    def user_representation(self, trace: ForwardTrace, layer: int | None = None) -> Tensor:
        """Hidden state of the requested layer at the last real position."""
        k = self.config.n_layers if layer is None else layer
        if not 0 <= k <= trace.n_layers:
            raise ConfigError(f"layer {k} outside 0..{trace.n_layers}")
        return ad.gather_rows(trace.hidden[k], trace.last_index)

    def score_items(self, user_rep: Tensor) -> Tensor:
        """Dot-product scores against the item table; pad item gets -inf."""
        down = ad.matmul(user_rep, self.params["down_proj"])
        scores = ad.matmul(down, ad.transpose(self.params["id_embedding"], (1, 0)))
        pad_bias = np.zeros(self.config.vocab, dtype=scores.dtype)
        pad_bias[0] = NEG_INF
        return ad.add(scores, Tensor(pad_bias))

    def logits(self, ids: np.ndarray, mask: np.ndarray, layer: int | None = None) -> Tensor:
        trace = self.forward(ids, mask)
        return self.score_items(self.user_representation(trace, layer))
