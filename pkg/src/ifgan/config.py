"""Run configuration with exhaustive key validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .losses import LossWeights
from .models import ClassifierDesc, DiscriminatorDesc, GeneratorDesc


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    corpus: str = "corpus/manifest.json"
    seed: int = 0
    precision: str = "f64"
    n_folds: int = 10
    fold: int = 0
    steps: int = 400
    batch_size: int = 8
    # loss weights (adversarial, L1, expression)
    lambda1: float = 1.0
    lambda2: float = 200.0
    lambda3: float = 50.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_e: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # preprocessing: aligned side, resize side N, crop side M
    image_side: int = 64
    resize_side: int = 72
    crop_side: int = 64
    peak_levels: list[int] = field(default_factory=lambda: [3, 4])
    train_min_level: int = 2
    # spurious identity/expression correlation in training folds (null = off)
    spurious_keep_other: float | None = None
    g_base_width: int = 16
    g_depth: int = 4
    d_base_width: int = 16
    d_stages: int = 3
    e_base_width: int = 16
    e_stages: int = 4
    e_blocks: int = 2
    g_zero_output: bool = False
    e_zero_head: bool = True
    checkpoint_every: int = 0
    eval_every: int = 0
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.precision in ("f32", "f64"), f"precision must be f32 or f64, got {self.precision!r}")
        need(self.n_folds >= 3, f"n_folds must be >= 3, got {self.n_folds}")
        need(0 <= self.fold < self.n_folds, f"fold {self.fold} outside [0, {self.n_folds})")
        need(self.steps >= 0, f"steps must be >= 0, got {self.steps}")
        need(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("lambda1", "lambda2", "lambda3"):
            need(getattr(self, name) >= 0, f"{name} must be non-negative")
        for name in ("lr_g", "lr_d", "lr_e"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1/beta2 must lie in [0, 1)")
        need(self.crop_side <= self.resize_side, f"crop_side {self.crop_side} exceeds resize_side {self.resize_side}")
        need(self.crop_side % (2 ** self.g_depth) == 0,
             f"crop_side {self.crop_side} must be divisible by 2**g_depth = {2 ** self.g_depth}")
        need(self.image_side >= 32, "image_side must be >= 32")
        need(len(self.peak_levels) > 0, "peak_levels must not be empty")
        need(self.train_min_level >= 1, "train_min_level must be >= 1")
        if self.spurious_keep_other is not None:
            need(0 <= self.spurious_keep_other <= 1, "spurious_keep_other must lie in [0, 1]")
        need(self.checkpoint_every >= 0 and self.eval_every >= 0, "cadences must be >= 0")

    def descriptors(self, num_classes: int) -> tuple[GeneratorDesc, DiscriminatorDesc, ClassifierDesc]:
        return (
            GeneratorDesc(1, self.g_base_width, self.g_depth, zero_output=self.g_zero_output),
            DiscriminatorDesc(1, self.d_base_width, self.d_stages),
            ClassifierDesc(1, num_classes, self.e_base_width, self.e_stages, self.e_blocks, self.e_zero_head),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in d.items():
            default = getattr(cls(), k) if k != "peak_levels" else []
            if isinstance(default, bool):
                ok = isinstance(v, bool)
            elif isinstance(default, int):
                ok = isinstance(v, int) and not isinstance(v, bool)
            elif isinstance(default, float):
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            elif isinstance(default, list):
                ok = isinstance(v, list) and all(isinstance(x, int) for x in v)
            elif default is None:
                ok = v is None or isinstance(v, (int, float))
            else:
                ok = isinstance(v, str)
            if not ok:
                raise ConfigError(f"config key {k!r} has invalid value {v!r}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)
