"""Run configuration: every hyperparameter, with validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class RunConfig:
    seed: int = 13
    # encoders
    dim: int = 64
    hash_buckets: int = 65536
    # serialization
    window: int = 6
    # retriever pre-training
    kl_weight: float = 0.2
    lr_pretrain: float = 5e-5
    batch_pretrain: int = 16
    pretrain_steps: int = 200
    optimizer: str = "sgd"
    # post-ranker
    hinge_margin: float = 0.5
    triplet_margin: float = 1.0
    triplet_weight: float = 0.5
    # curriculum
    curriculum_lower: float = 1.0
    curriculum_upper: float = 4.0
    # joint training
    lr_joint: float = 5e-5
    batch_joint: int = 2
    joint_iterations: int = 200
    top_k: int = 100
    top_t: int = 5
    use_postranker: bool = True
    force_inject: bool = False
    checkpoint_every: int = 0
    # reader
    max_span_len: int = 10
    top_n_spans: int = 20
    # evaluation
    stopword_path: str | None = None
    human_f1: float = 1.0
    # synthetic corpus generation
    n_passages: int = 10000
    n_conversations: int = 500
    turns_per_conv: int = 3
    vocab_size: int = 4000
    dev_fraction: float = 0.1

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigError("dim", "must be >= 2")
        if self.hash_buckets < 1:
            raise ConfigError("hash_buckets", "must be >= 1")
        if self.window < 0:
            raise ConfigError("window", "must be >= 0")
        if not 0.0 <= self.kl_weight <= 1.0:
            raise ConfigError("kl_weight", "must lie in [0, 1]")
        if self.top_t < 1:
            raise ConfigError("top_t", "must be >= 1")
        if self.top_t > self.top_k:
            raise ConfigError("top_t", f"must not exceed top_k ({self.top_k})")
        if not self.curriculum_lower < self.curriculum_upper:
            raise ConfigError("curriculum_lower", "must be strictly below curriculum_upper")
        for name in ("lr_pretrain", "lr_joint"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        for name in ("batch_pretrain", "batch_joint", "pretrain_steps",
                     "joint_iterations", "max_span_len", "top_n_spans",
                     "n_passages", "n_conversations", "turns_per_conv", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction", "must lie in (0, 1)")
        if self.triplet_weight < 0:
            raise ConfigError("triplet_weight", "must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every", "must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer", "must be sgd or adam")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration field")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        """Apply repeatable --set key=value flags; values parse as JSON with a
        bare-string fallback."""
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(pair, "override must look like key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in data:
                raise ConfigError(key, "unknown configuration field")
            try:
                data[key] = json.loads(raw)
            except json.JSONDecodeError:
                data[key] = raw
        return RunConfig.from_dict(data)
