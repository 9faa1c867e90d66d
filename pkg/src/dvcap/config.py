"""Run configuration: dotted-key JSON files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .captioner import CaptionerConfig
from .tep import TepConfig


class ValidationError(ValueError):
    """Bad user input: config, dataset, checkpoint or CLI preconditions."""


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 20.0
    lr: float = 1e-5
    sg_lr: float | None = None  # pretraining rate; falls back to lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    pretrain_epochs: int = 30
    tep_warmup_epochs: int = 0
    seed: int = 0
    clip_norm: float = 5.0
    joint_topk: int = 4
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("train.lambda1 and train.lambda2 must be non-negative")
        if self.lr < 0:
            raise ValidationError("train.lr must be non-negative")


@dataclass
class SynthConfig:
    num_videos: int = 20
    t_f: int = 128
    d0: int = 32
    prototypes: int = 16
    min_events: int = 2
    max_events: int = 4
    min_width: int = 6
    max_width: int = 40
    noise: float = 0.3
    seed: int = 7


@dataclass
class EvalConfig:
    an_max: int = 100
    top_k: int = 1000
    metrics: tuple[str, ...] = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor_lite", "cider_d")


@dataclass
class Config:
    tep: TepConfig = field(default_factory=TepConfig)
    sg: CaptionerConfig = field(default_factory=CaptionerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    vocab_path: str | None = None

    @classmethod
    def full(cls) -> "Config":
        """Full-scale settings: 1024-clip inputs, 9 anchor layers, lr 1e-5."""
        return cls()

    @classmethod
    def desk(cls) -> "Config":
        """Small network and faster learning rates for the synthetic corpus."""
        cfg = cls()
        cfg.tep = dataclasses.replace(
            cfg.tep, t_f=128, d0=32, base_filters=(128, 128), anchor_layers=5, anchor_filters=128, select_topk=1000
        )
        cfg.sg = dataclasses.replace(cfg.sg, hidden=64, max_len=20)
        cfg.train = dataclasses.replace(cfg.train, lr=1e-3, sg_lr=3e-3)
        return cfg

    def to_flat(self) -> dict:
        flat = {}
        for section in ("tep", "sg", "train", "synth", "eval"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        flat["sg.vocab_path"] = self.vocab_path
        return flat

    def hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.tep.validate()
        except ValueError as e:
            raise ValidationError(str(e)) from e
        self.train.validate()
        if self.sg.reward_metric not in ("meteor_lite", "bleu4", "cider_d"):
            raise ValidationError(f"sg.reward_metric must be meteor_lite, bleu4 or cider_d, got {self.sg.reward_metric!r}")


def _flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def apply_overrides(cfg: Config, values: dict) -> Config:
    """Apply dotted-key overrides (nested dicts are flattened); unknown keys are rejected."""
    known = cfg.to_flat()
    for key, value in _flatten(values).items():
        if key not in known:
            raise ValidationError(f"unknown config key {key!r}")
        if key == "sg.vocab_path":
            cfg.vocab_path = value
            continue
        section, name = key.split(".", 1)
        target = getattr(cfg, section)
        current = getattr(target, name)
        if isinstance(current, tuple):
            value = tuple(value)
        setattr(cfg, section, dataclasses.replace(target, **{name: value}))
    return cfg


def load_config(path: str | Path | None = None, base: Config | None = None) -> Config:
    cfg = base or Config.desk()
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ValidationError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(values, dict):
            raise ValidationError("config file must hold a JSON object")
        apply_overrides(cfg, values)
    cfg.validate()
    return cfg
