"""Flat key=value run configuration.

One config namespace covers the whole pipeline; commands read the subset
they need. Values come from built-in defaults, then an optional config
file, then repeatable ``--set key=value`` command-line overrides, in that
order. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainSettings

DEFAULTS: dict[str, object] = {
    "data.dir": "data",
    "data.seq_len": 50,
    "model.hidden": 256,
    "model.heads": 4,
    "model.id_dim": 64,
    "model.prefix_len": 4,
    "model.ffn_hidden": 0,
    "model.freeze_id_embedding": True,
    "teacher.layers": 8,
    "student.layers": 4,
    "pretrain.steps": 200,
    "pretrain.layers": 2,
    "pretrain.heads": 2,
    "pretrain.lr": 3e-3,
    "pretrain.batch_size": 128,
    "train.batch_size": 64,
    "train.max_steps": 300,
    "train.lr": 1e-3,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.weight_decay": 0.01,
    "train.max_grad_norm": 1.0,
    "train.warmup_steps": 30,
    "train.eval_steps": 100,
    "train.seed": 0,
    "distill.blocks": 4,
    "distill.lambda_cos": 1.0,
    "distill.lambda_norm": 0.1,
    "distill.lambda_ms": 1.0,
    "distill.mode": "offline",
    "distill.detach_teacher": True,
    "distill.cache_teacher_features": True,
    "eval.negatives": 999,
    "eval.seed": 17,
    "eval.batch_size": 256,
}


class RunConfig:
    """Validated view over the flat key space."""

    def __init__(self, values: dict[str, object] | None = None):
        self.values = dict(DEFAULTS)
        if values:
            for key, raw in values.items():
                self.set(key, raw)

    def set(self, key: str, raw: object) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw)

    def get(self, key: str):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def __getitem__(self, key: str):
        return self.get(key)

    def as_dict(self) -> dict[str, object]:
        return dict(self.values)

    def hash(self) -> str:
        canon = "\n".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    # -- typed sub-configs ------------------------------------------------

    def model_config(self, n_items: int, layers: int) -> ModelConfig:
        return ModelConfig(
            n_items=n_items,
            n_layers=layers,
            hidden=self["model.hidden"],
            heads=self["model.heads"],
            id_dim=self["model.id_dim"],
            prefix_len=self["model.prefix_len"],
            seq_len=self["data.seq_len"],
            ffn_hidden=self["model.ffn_hidden"],
            freeze_id_embedding=self["model.freeze_id_embedding"],
        )

    def teacher_config(self, n_items: int) -> ModelConfig:
        return self.model_config(n_items, self["teacher.layers"])

    def student_config(self, n_items: int) -> ModelConfig:
        return self.model_config(n_items, self["student.layers"])

    def train_settings(self, seed: int | None = None) -> TrainSettings:
        return TrainSettings(
            batch_size=self["train.batch_size"],
            max_steps=self["train.max_steps"],
            lr=self["train.lr"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            adam_eps=self["train.adam_eps"],
            weight_decay=self["train.weight_decay"],
            max_grad_norm=self["train.max_grad_norm"],
            warmup_steps=self["train.warmup_steps"],
            eval_steps=self["train.eval_steps"],
            seed=self["train.seed"] if seed is None else seed,
            eval_negatives=self["eval.negatives"],
            eval_seed=self["eval.seed"],
            eval_batch_size=self["eval.batch_size"],
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            blocks=self["distill.blocks"],
            lam_cos=self["distill.lambda_cos"],
            lam_norm=self["distill.lambda_norm"],
            lam_ms=self["distill.lambda_ms"],
            mode=self["distill.mode"],
            detach_teacher=self["distill.detach_teacher"],
            cache_teacher_features=self["distill.cache_teacher_features"],
        )


def _coerce(key: str, raw: object):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key} expects a boolean, got {raw!r}")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key} expects {type(default).__name__}, got {raw!r}") from exc
        return text
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, int) and not isinstance(raw, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for i, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{i}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def build_config(config_file: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if config_file:
        for key, value in parse_config_file(config_file).items():
            cfg.set(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg
