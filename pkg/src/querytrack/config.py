"""Run configuration, deterministic seed derivation, and run manifests.

All randomness in the package flows from a single root seed. Consumers ask
for a substream via rng_for(root, *labels); the labels are hashed with
crc32 into a numpy SeedSequence, so independent components get independent,
reproducible generators and ablation arms differ only in the intended factor.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def rng_for(root_seed: int, *labels) -> np.random.Generator:
    """Deterministic substream: SeedSequence over (root, crc32(label)...)."""
    entropy = [int(root_seed) & 0xFFFFFFFF]
    for label in labels:
        entropy.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class RunConfig:
    """All hyperparameters, with defaults matching the training recipe."""

    # loss weights
    lam_cls: float = 2.0
    lam_l1: float = 5.0
    lam_giou: float = 2.0
    lam_tri: float = 2.0
    lam_i2tce: float = 4.0
    margin: float = 0.3
    smoothing: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    temperature: float = 1.0
    raw_dot: bool = False

    # tracking
    score_threshold: float = 0.5
    patience: int = 5
    detect_factor: float = 2.0
    detect_extra: int = 8
    dem_enabled: bool = True
    reassociate: bool = False
    reassoc_threshold: float = 0.6
    reassoc_window: int = 40
    ema_factor: float = 0.9

    # model dimensions
    embed_dim: int = 64
    model_dim: int = 64
    heads: int = 4
    mlp_hidden: int = 256
    proj_dim: int = 32
    word_dim: int = 32
    latent_dim: int = 8
    context_len: int = 4
    prompt_len: int = 4
    pseudo_layers: int = 1

    # training
    clip_len: int = 4
    interval_min: int = 1
    interval_max: int = 10
    pool_capacity: int = 512
    prompt_lr: float = 3.5e-4
    tune_steps: int = 500
    tune_steps_loop: int = 40
    tune_batch: int = 0
    dem_lr: float = 0.2
    dem_train_steps: int = 6000
    align_lr: float = 0.1
    epochs: int = 2
    assign: str = "qbs"
    align: bool = True
    reassoc_tune_steps: int = 60
    reassoc_min_samples: int = 3

    # seeds
    seed: int = 0
    encoder_seed: int = 0

    def validate(self) -> None:
        for name in ("lam_cls", "lam_l1", "lam_giou", "lam_tri", "lam_i2tce"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("smoothing must be in [0,1)")
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError("score_threshold must be in (0,1)")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ConfigError("model_dim must be divisible by heads")
        if self.interval_min < 1 or self.interval_max < self.interval_min:
            raise ConfigError("need 1 <= interval_min <= interval_max")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be >= 1")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if self.pool_capacity < 1:
            raise ConfigError("pool_capacity must be >= 1")
        if self.tune_batch < 0:
            raise ConfigError("tune_batch must be >= 0 (0 means full pool)")
        if self.pseudo_layers < 1:
            raise ConfigError("pseudo_layers must be >= 1")
        if self.assign not in ("qbs", "motr"):
            raise ConfigError(f"assign must be 'qbs' or 'motr', got {self.assign!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")

    # -- key=value grammar ----------------------------------------------------

    def to_text(self) -> str:
        """Canonical serialization: field order, key=value, one per line."""
        rows = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            rows.append(f"{f.name}={v}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values: dict = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in fields:
                raise ConfigError(f"line {line_no}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {line_no}: duplicate key {key!r}")
            values[key] = _coerce(val, fields[key].type, key, line_no)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg


def _coerce(val: str, typ, key: str, line_no: int):
    typ = {"float": float, "int": int, "bool": bool, "str": str}.get(typ, typ)
    try:
        if typ is bool:
            if val.lower() in ("true", "1", "yes"):
                return True
            if val.lower() in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if typ is int:
            return int(val)
        if typ is float:
            return float(val)
        return val
    except ValueError:
        raise ConfigError(
            f"line {line_no}: cannot parse {val!r} as {typ.__name__} for {key!r}"
        ) from None


# -- manifests ------------------------------------------------------------------


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def make_manifest(config: RunConfig, command: str,
                  inputs: dict[str, str] | None = None,
                  extras: dict | None = None) -> dict:
    """Reproducibility record: resolved config, seeds, input content hashes."""
    manifest = {
        "command": command,
        "config": config.to_text(),
        "config_sha256": sha256_text(config.to_text()),
        "seed": config.seed,
        "encoder_seed": config.encoder_seed,
        "inputs": {name: sha256_text(content)
                   for name, content in sorted((inputs or {}).items())},
    }
    if extras:
        manifest["extras"] = extras
    return manifest


def manifest_text(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"
