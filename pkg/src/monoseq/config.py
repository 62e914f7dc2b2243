"""Configuration dataclasses, JSON round-trip, and config hashing.

Defaults are the desk-scale reference: every ratio of the full-size
configuration is preserved at CPU-trainable widths, and the full-size
numbers remain expressible.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class ModelConfig:
    vocab: int = 48
    variant: str = "vat"  # "t5" or "vat"

    enc_width: int = 64
    enc_blocks: int = 3
    enc_heads: int = 4
    enc_conv_blocks: int = 3
    enc_downsample: int = 2

    dec_width: int = 128
    dec_blocks: int = 3
    dec_heads: int = 4

    channels: int = 4  # codes per frame (M)
    codebook: int = 16  # codes per channel (K); channel 1 code 0 is EOS
    cond_count: int = 4

    buckets_side: int = 16  # symmetric tables, per side
    buckets_causal: int = 32  # causal tables, all negative
    d_cross: int = 32
    d_enc_self: int = 32
    d_dec_self: int = 64

    sigma_init: float = 8.0
    self_bias_scale: float = 0.5
    mdp: float = 1.0
    gaussian_over_distances: bool = True

    align_cell: int = 64
    align_heads: int = 4
    align_delta_bias: float = -1.25
    align_feedforward: bool = True

    dropout: float = 0.1
    temperature: float = 0.7
    train_frame_cap: int = 128
    final_norm: bool = True  # norm before the categorical head
    norm_kind: str = "rms"  # fixed choice, echoed for the record
    ff_activation: str = "gelu"  # fixed choice, echoed for the record
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        if self.variant not in ("t5", "vat"):
            raise ConfigError(f"unknown variant {self.variant!r}; expected 't5' or 'vat'")
        if self.dec_width % self.dec_heads:
            raise ConfigError(f"decoder width {self.dec_width} not divisible by {self.dec_heads} heads")
        if self.enc_width % self.enc_heads:
            raise ConfigError(f"encoder width {self.enc_width} not divisible by {self.enc_heads} heads")
        if self.dec_width % self.channels:
            raise ConfigError(f"decoder width {self.dec_width} not divisible by {self.channels} channels")
        if self.d_dec_self >= self.train_frame_cap:
            raise ConfigError(
                f"decoder self-attention max distance {self.d_dec_self} must stay below "
                f"the training frame cap {self.train_frame_cap}"
            )
        if self.norm_kind != "rms" or self.ff_activation != "gelu":
            raise ConfigError("only rms norm and gelu feedforward are implemented")
        np.dtype(self.dtype)
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TaskConfig:
    vocab: int = 48
    channels: int = 4
    codebook: int = 16
    jitter_prob: float = 0.25
    repeat_prob: float = 0.05
    frame_cap: int = 128
    min_tokens: int = 4
    max_tokens: int = 96

    def validate(self) -> "TaskConfig":
        if self.vocab > (self.codebook - 1) * self.codebook:
            raise ConfigError(
                f"vocab {self.vocab} too large to encode in channels 1 and 3 "
                f"(limit {(self.codebook - 1) * self.codebook})"
            )
        if not 0 <= self.jitter_prob <= 1 or not 0 <= self.repeat_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ConfigError(f"bad token range [{self.min_tokens}, {self.max_tokens}]")
        return self


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 16
    seed: int = 0
    clip_norm: float = 1.0
    base_lr: float | None = None  # None: 0.01 / sqrt(dec_width)
    lr_decay_fracs: tuple = (0.77, 0.85, 0.92)
    checkpoint_interval: int = 500
    log_interval: int = 25
    eval_samples: int = 16
    finite_checks: bool = False  # the loss is still checked every step

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip threshold must be positive, got {self.clip_norm}")
        return self


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.task.validate()
        self.train.validate()
        if self.task.vocab != self.model.vocab:
            raise ConfigError(f"task vocab {self.task.vocab} != model vocab {self.model.vocab}")
        if (self.task.channels, self.task.codebook) != (self.model.channels, self.model.codebook):
            raise ConfigError("task and model disagree on channels/codebook")
        if self.task.frame_cap != self.model.train_frame_cap:
            raise ConfigError("task frame cap and model training cap must match")
        return self


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(f.default, tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    return ExperimentConfig(
        model=_from_dict(ModelConfig, data.get("model", {})),
        task=_from_dict(TaskConfig, data.get("task", {})),
        train=_from_dict(TrainConfig, data.get("train", {})),
    ).validate()


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "model": dataclasses.asdict(cfg.model),
        "task": dataclasses.asdict(cfg.task),
        "train": dataclasses.asdict(cfg.train),
    }


def load_experiment(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return experiment_from_dict(json.load(fh))


def save_experiment(path: str, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(experiment_to_dict(cfg), fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=list).encode()).hexdigest()[:16]
