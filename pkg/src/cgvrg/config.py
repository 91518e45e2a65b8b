"""Pipeline configuration: one flat JSON object, presets, and validation.

Schema (all keys optional, unknown keys rejected):

  paths            corpus_path, output_dir
  dimensions       feature_dim, embed, bottom, top, node, att_hidden, mil_hidden
  graph            threshold (tau), edge_cap (K), predicate_cap (M), min_word_freq
  captioner        block ("MT-I" | "MT-II"), gamma, lr, batch_size, epochs,
                   lr_decay_every, lr_decay_rate, beam, max_len
  detector         mil_lr, mil_batch_size, mil_epochs
  self-critical    scst_lr, scst_batch_size, scst_steps, scst_epochs
  toy data         toy_images, toy_categories, toy_predicates, toy_noise
  seed             single root seed; stages draw named substreams from it

``top`` and ``node`` must be equal: the MT-II block adds attended node
features to the top LSTM state.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, asdict, fields
from pathlib import Path

from .decoder import BLOCKS, CaptionerDims

OUTPUT_DIR_ENV = "CGVRG_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    corpus_path: str = ""
    output_dir: str = "runs/toy"

    feature_dim: int = 32
    embed: int = 64
    bottom: int = 32
    top: int = 64
    node: int = 64
    att_hidden: int = 32
    mil_hidden: int = 64

    threshold: float = 0.5
    edge_cap: int = 20
    predicate_cap: int = 200
    min_word_freq: int = 1

    block: str = "MT-I"
    gamma: float = 0.15
    lr: float = 0.002
    batch_size: int = 5
    epochs: int = 200
    lr_decay_every: int = 20
    lr_decay_rate: float = 0.7
    beam: int = 3
    max_len: int = 16

    mil_lr: float = 0.005
    mil_batch_size: int = 4
    mil_epochs: int = 30

    scst_lr: float = 1e-4
    scst_batch_size: int = 5
    scst_steps: int = 200
    scst_epochs: int = 0

    toy_images: int = 20
    toy_categories: int = 6
    toy_predicates: int = 3
    toy_noise: float = 0.1

    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if self.top != self.node:
            raise ConfigError(f"top: top LSTM size {self.top} must equal node feature size {self.node}")
        if self.gamma < 0:
            raise ConfigError(f"gamma: must be >= 0, got {self.gamma}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold: must lie in [0, 1], got {self.threshold}")
        if self.beam < 1:
            raise ConfigError(f"beam: must be >= 1, got {self.beam}")
        if self.block not in BLOCKS:
            raise ConfigError(f"block: must be one of {BLOCKS}, got {self.block!r}")
        for name in ("feature_dim", "embed", "bottom", "top", "node", "att_hidden", "mil_hidden",
                     "predicate_cap", "batch_size", "mil_batch_size", "scst_batch_size", "max_len",
                     "min_word_freq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {getattr(self, name)}")
        for name in ("epochs", "mil_epochs", "scst_steps", "scst_epochs", "edge_cap", "lr_decay_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("lr", "mil_lr", "scst_lr", "toy_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if not 0 < self.lr_decay_rate <= 1:
            raise ConfigError(f"lr_decay_rate: must lie in (0, 1], got {self.lr_decay_rate}")
        if self.toy_categories < 2 or self.toy_predicates < 1 or self.toy_images < 1:
            raise ConfigError("toy_categories/toy_predicates/toy_images: need >= 2 / >= 1 / >= 1")
        return self

    def dims(self) -> CaptionerDims:
        return CaptionerDims(self.feature_dim, self.embed, self.bottom, self.top, self.node, self.att_hidden)

    def to_json(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def corpus(self) -> Path:
        return Path(self.corpus_path) if self.corpus_path else self.out / "corpus.jsonl"


PRESETS: dict[str, dict] = {
    "desk": {},
    # reported implementation settings; validated for consistency, not trained here
    "full-scale": {
        "feature_dim": 2048,
        "embed": 1000,
        "bottom": 512,
        "top": 1000,
        "node": 1000,
        "mil_hidden": 1000,
        "att_hidden": 512,
        "predicate_cap": 200,
        "gamma": 0.15,
        "beam": 3,
        "lr": 0.0005,
        "batch_size": 100,
        "epochs": 30,
        "lr_decay_every": 0,
        "lr_decay_rate": 1.0,
        "mil_lr": 0.0005,
        "mil_batch_size": 100,
        "mil_epochs": 30,
        "scst_lr": 0.0005,
        "scst_batch_size": 100,
        "scst_epochs": 30,
    },
}


def _coerce(name: str, value):
    types = {f.name: f.type for f in fields(PipelineConfig)}
    if name not in types:
        raise ConfigError(f"{name}: unknown configuration key")
    kind = types[name]
    try:
        if kind in ("int", int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind in ("float", float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from None


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None, preset: str = "desk",
                env: dict | None = None) -> PipelineConfig:
    """Preset < config file < OUTPUT_DIR_ENV (output_dir only) < explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    values = dict(PRESETS[preset])
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config: file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a flat object")
        values.update(data)
    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        values["output_dir"] = env[OUTPUT_DIR_ENV]
    values.update(overrides or {})
    cfg = PipelineConfig(**{k: _coerce(k, v) for k, v in values.items()})
    return cfg.validate()


def replace(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return dataclasses.replace(cfg, **changes).validate()
