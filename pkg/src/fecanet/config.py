"""Run configuration shared by the model, trainer and CLI."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

from .errors import ValidationError

SEED_ENV = "FECANET_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    k: int = 5                  # self-similarity window
    depth: int = 2              # multi-scale conv depth N
    tau: float = 0.5            # K-shot vote threshold
    lr: float = 1e-3
    shots: int = 1
    batch_size: int = 4
    steps: int = 500
    # ablation switches
    fem: bool = True
    gc: bool = True
    keep_background: bool = True
    bank: bool = True
    # desk-scale sizes
    image_size: int = 32
    backbone_widths: tuple[int, ...] = (8, 16, 24, 32)
    level_maps: tuple[int, int, int] = (3, 4, 3)
    coarse_stride: int = 1      # 1 -> level strides 4/8/8, 2 -> 4/8/16
    encoder_widths: tuple[int, int, int] = (16, 32, 64)
    ms_width: int = 16

    def validate(self) -> "RunConfig":
        if self.k < 1 or self.k % 2 == 0:
            raise ValidationError(f"k must be a positive odd integer, got {self.k}")
        if self.depth < 1:
            raise ValidationError(f"depth N must be >= 1, got {self.depth}")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.shots < 1 or self.batch_size < 1 or self.steps < 0:
            raise ValidationError("shots and batch_size must be >= 1 and steps >= 0")
        if len(self.level_maps) != 3 or min(self.level_maps) < 1:
            raise ValidationError(f"level_maps needs three positive counts, got {self.level_maps}")
        if len(self.backbone_widths) != 4 or len(self.encoder_widths) != 3:
            raise ValidationError("backbone_widths needs 4 entries and encoder_widths 3")
        if any(w % 4 for w in self.encoder_widths):
            raise ValidationError(f"encoder widths must be divisible by 4 (group norm), got {self.encoder_widths}")
        if self.coarse_stride not in (1, 2):
            raise ValidationError(f"coarse_stride must be 1 or 2, got {self.coarse_stride}")
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def apply_seed_env(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.replace(seed=int(raw))
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
