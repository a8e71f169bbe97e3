"""Residual 2D decoder and the per-query memory bank of previous predictions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, uniform_init


@dataclass
class DecoderParams:
    stage_w: list[Tensor]   # [C, C, k, k] residual convs, k in (3, 5)
    stage_b: list[Tensor]
    head_w: Tensor          # [2, C, 3, 3]
    head_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, ctx_channels: int, kernels=(3, 5)) -> "DecoderParams":
        c = ctx_channels + 1
        stage_w = [Tensor(uniform_init(rng, (c, c, k, k), c * k * k)) for k in kernels]
        stage_b = [Tensor(uniform_init(rng, (c,), c * k * k)) for k in kernels]
        return cls(stage_w, stage_b,
                   Tensor(uniform_init(rng, (2, c, 3, 3), c * 9)), Tensor(uniform_init(rng, (2,), c * 9)))

    def named(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.stage_w, self.stage_b)):
            yield f"{prefix}.stage{i}.w", w
            yield f"{prefix}.stage{i}.b", b
        yield f"{prefix}.head.w", self.head_w
        yield f"{prefix}.head.b", self.head_b


@dataclass
class PredictionMap:
    logits: Tensor           # [2, H, W] at query image size
    probs: Tensor            # softmax over channels
    coarse_fg: np.ndarray    # [1, h, w] foreground probability at decoder resolution

    @property
    def fg(self) -> np.ndarray:
        return self.probs.data[1]

    @property
    def mask(self) -> np.ndarray:
        """Argmax over the two channels; ties go to background."""
        p = self.probs.data
        return (p[1] > p[0]).astype(np.uint8)


def _conv_bias(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    k = w.shape[2]
    return T.add(T.conv2d(x, w, stride=1, pad=k // 2), T.reshape(b, (-1, 1, 1)))


def residual_decode(ctx: Tensor, prior: np.ndarray | Tensor, params: DecoderParams,
                    out_size: tuple[int, int]) -> PredictionMap:
    if ctx.ndim != 3:
        raise ShapeError(f"context must be [C,H,W], got {ctx.dims}")
    prior = prior if isinstance(prior, Tensor) else Tensor(np.asarray(prior).reshape((1,) + np.asarray(prior).shape[-2:]))
    prior = T.resize_bilinear(prior, ctx.shape[1], ctx.shape[2])
    x = T.concat([ctx, prior], axis=0)
    if x.shape[0] != params.head_w.shape[1]:
        raise ShapeError(f"decoder expects {params.head_w.shape[1] - 1} context channels, got {ctx.shape[0]}")
    for w, b in zip(params.stage_w, params.stage_b):
        x = T.add(x, T.relu(_conv_bias(x, w, b)))
    coarse = _conv_bias(x, params.head_w, params.head_b)
    logits = T.resize_bilinear(coarse, *out_size)
    probs = T.softmax_axis(logits, axis=0)
    c = coarse.data.astype(np.float64)
    coarse_fg = 1.0 / (1.0 + np.exp(np.clip(c[0] - c[1], -500.0, 500.0)))
    return PredictionMap(logits, probs, coarse_fg[None].astype(np.float32))


@dataclass
class MemoryBank:
    """Last foreground-probability map per query id; absent ids read as zeros."""

    entries: dict[Hashable, np.ndarray] = field(default_factory=dict)

    def fetch(self, qid: Hashable, shape: tuple[int, int]) -> np.ndarray:
        stored = self.entries.get(qid)
        if stored is None:
            return np.zeros((1,) + tuple(shape), dtype=np.float32)
        return stored.copy()

    def update(self, qid: Hashable, pred: PredictionMap) -> "MemoryBank":
        self.entries[qid] = np.clip(pred.coarse_fg, 0.0, 1.0).astype(np.float32)
        return self

    def store(self, qid: Hashable, fg: np.ndarray) -> None:
        fg = np.asarray(fg, dtype=np.float32)
        self.entries[qid] = fg.reshape((1,) + fg.shape[-2:]).copy()

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, qid) -> bool:
        return qid in self.entries


def bank_fetch(bank: MemoryBank, qid, shape: tuple[int, int]) -> np.ndarray:
    return bank.fetch(qid, shape)


def bank_update(bank: MemoryBank, qid, pred: PredictionMap) -> MemoryBank:
    return bank.update(qid, pred)
