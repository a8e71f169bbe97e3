"""Episodes and the synthetic shapes dataset used at desk scale."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..correlation import check_binary
from ..errors import ShapeError, ValidationError

CLASS_NAMES = {0: "rectangle", 1: "disc"}
# foreground colour per class; backgrounds are smooth grey noise
_CLASS_COLOURS = {0: (0.9, 0.25, 0.2), 1: (0.2, 0.35, 0.9)}


@dataclass
class Episode:
    supports: list[tuple[np.ndarray, np.ndarray]]   # (image [3,H,W], mask [H,W])
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    query_id: str

    def __post_init__(self):
        self.validate()

    @property
    def shots(self) -> int:
        return len(self.supports)

    @property
    def size(self) -> tuple[int, int]:
        return self.query_image.shape[1], self.query_image.shape[2]

    def validate(self) -> None:
        if not self.supports:
            raise ValidationError(f"episode {self.query_id!r} has no support pairs")
        if self.query_image.ndim != 3 or self.query_image.shape[0] != 3:
            raise ShapeError(f"query image must be [3,H,W], got {self.query_image.shape}")
        hw = self.query_image.shape[1:]
        check_binary(self.query_mask)
        if self.query_mask.shape != hw:
            raise ShapeError(f"query mask {self.query_mask.shape} does not match image {hw}")
        for img, mask in self.supports:
            check_binary(mask)
            if img.shape != self.query_image.shape or mask.shape != hw:
                raise ShapeError(f"support pair {img.shape}/{mask.shape} disagrees with query {self.query_image.shape}")


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    sample_id: str


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.3, 0.6, size=(4, 4))
    idx = np.minimum(np.arange(size) * 4 // size, 3)
    smooth = coarse[np.ix_(idx, idx)]
    grey = smooth + rng.normal(0.0, 0.03, size=(size, size))
    return np.repeat(grey[None], 3, axis=0)


def _shape_mask(rng: np.random.Generator, class_id: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    if class_id == 0:
        h, w = rng.integers(size // 4, size // 2 + 1, size=2)
        top, left = rng.integers(1, size - h), rng.integers(1, size - w)
        mask = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    else:
        r = rng.uniform(size / 7, size / 4)
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
    return mask.astype(np.uint8)


def make_sample(rng: np.random.Generator, class_id: int, size: int, sample_id: str) -> Sample:
    image = _background(rng, size)
    mask = _shape_mask(rng, class_id, size)
    colour = np.asarray(_CLASS_COLOURS[class_id])[:, None, None]
    fg = colour + rng.normal(0.0, 0.03, size=(3, size, size))
    image = np.where(mask[None] > 0, fg, image)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, class_id, sample_id)


def make_pool(seed: int, per_class: int = 4, size: int = 32, classes: Sequence[int] = (0, 1)) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [make_sample(rng, c, size, f"c{c}_{i}") for c in classes for i in range(per_class)]


@dataclass
class EpisodeSampler:
    """Draws (class, supports, query) uniformly from a labelled pool, seeded."""

    pool: list[Sample]
    seed: int = 0
    rng: np.random.Generator = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.by_class: dict[int, list[Sample]] = {}
        for s in self.pool:
            self.by_class.setdefault(s.class_id, []).append(s)

    def sample(self, shots: int = 1) -> Episode:
        classes = sorted(c for c, items in self.by_class.items() if len(items) > shots)
        if not classes:
            raise ValidationError(f"no class has more than {shots} samples")
        c = classes[self.rng.integers(len(classes))]
        items = self.by_class[c]
        picks = self.rng.choice(len(items), size=shots + 1, replace=False)
        query = items[picks[0]]
        supports = [(items[i].image, items[i].mask) for i in picks[1:]]
        return Episode(supports, query.image, query.mask, c, query.sample_id)


def synthetic_episodes(n: int = 4, size: int = 32, seed: int = 0, shots: int = 1) -> list[Episode]:
    """Fixed episodes over rectangles (class 0) and discs (class 1), classes alternating."""
    rng = np.random.default_rng(seed)
    episodes = []
    for i in range(n):
        c = i % 2
        query = make_sample(rng, c, size, f"q{i}")
        supports = [make_sample(rng, c, size, f"s{i}_{j}") for j in range(shots)]
        episodes.append(Episode([(s.image, s.mask) for s in supports], query.image, query.mask, c, query.sample_id))
    return episodes
