"""4D cosine-similarity tensors between query and support feature maps.

A correlation tensor has dims ``[Ch, Hq, Wq, Hs, Ws]``. The pyramid groups
them into three levels ordered fine to coarse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .tensor import Tensor

EPS = 1e-8
NUM_LEVELS = 3


def _check_map(x: Tensor, what: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{what} must be a [C,H,W] feature map, got dims {x.dims}")


def _channel_dot(a: Tensor, b: Tensor) -> Tensor:
    # Explicit product-then-sum over channels (sequential along axis 0) so that
    # swapping the operands yields bit-identical values.
    prod = T.mul(T.reshape(a, (a.shape[0], a.shape[1], 1)), T.reshape(b, (b.shape[0], 1, b.shape[1])))
    return T.sum_(prod, axis=0)


def cosine_correlation(fq: Tensor, fs: Tensor) -> Tensor:
    """ReLU-clamped cosine similarity between every query and support position."""
    _check_map(fq, "query features")
    _check_map(fs, "support features")
    if fq.shape[0] != fs.shape[0]:
        raise ShapeError(f"channel mismatch: query {fq.shape[0]} vs support {fs.shape[0]}")
    C, Hq, Wq = fq.shape
    _, Hs, Ws = fs.shape
    qn = T.l2_normalize(T.reshape(fq, (C, Hq * Wq)), axis=0, eps=EPS)
    sn = T.l2_normalize(T.reshape(fs, (C, Hs * Ws)), axis=0, eps=EPS)
    corr = T.relu(_channel_dot(qn, sn))
    return T.reshape(corr, (1, Hq, Wq, Hs, Ws))


def check_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError("mask values must be 0 or 1")
    return mask


def resize_mask_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize: output (i, j) samples floor(i*H/h), floor(j*W/w)."""
    H, W = mask.shape
    rows = np.minimum((np.arange(h) * H) // h, H - 1)
    cols = np.minimum((np.arange(w) * W) // w, W - 1)
    return mask[np.ix_(rows, cols)]


def mask_features(fs: Tensor, support_mask: np.ndarray) -> Tensor:
    """Zero out support feature positions outside the (resized) object mask."""
    m = resize_mask_nearest(check_binary(support_mask), fs.shape[1], fs.shape[2])
    return T.mul(fs, Tensor(m[None].astype(np.float64)))


def masked_hypercorrelation(fq: Tensor, fs: Tensor, support_mask: np.ndarray) -> Tensor:
    """HSNet-style correlation with background support positions discarded."""
    _check_map(fs, "support features")
    return cosine_correlation(fq, mask_features(fs, support_mask))


@dataclass
class CorrelationPyramid:
    levels: list[Tensor]

    def channels(self) -> list[int]:
        return [lv.shape[0] for lv in self.levels]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]


def stack_and_group(correlations: Sequence[tuple[Tensor, int]]) -> CorrelationPyramid:
    """Concatenate same-level correlations along channels; level tags are 0, 1, 2."""
    buckets: list[list[Tensor]] = [[] for _ in range(NUM_LEVELS)]
    for corr, level in correlations:
        if not 0 <= level < NUM_LEVELS:
            raise ShapeError(f"level tag {level} outside 0..{NUM_LEVELS - 1}")
        if corr.ndim != 5:
            raise ShapeError(f"correlation must have dims [Ch,Hq,Wq,Hs,Ws], got {corr.dims}")
        buckets[level].append(corr)
    levels = []
    for i, group in enumerate(buckets):
        if not group:
            raise ShapeError(f"pyramid level {i} is empty")
        spatial = {g.shape[1:] for g in group}
        if len(spatial) != 1:
            raise ShapeError(f"level {i} mixes spatial dims {sorted(spatial)}")
        levels.append(group[0] if len(group) == 1 else T.concat(group, axis=0))
    for a, b in zip(levels, levels[1:]):
        if any(y > x for x, y in zip(a.shape[1:], b.shape[1:])):
            raise ShapeError(f"pyramid spatial dims must not grow: {a.dims[1:]} then {b.dims[1:]}")
    return CorrelationPyramid(levels)
