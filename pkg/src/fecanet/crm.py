"""Correlation reconstruction: dense correlations plus a global-context channel.

The global-context channel compares multi-scale local self-similarity
descriptors of the enhanced query and support maps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .correlation import CorrelationPyramid, cosine_correlation, masked_hypercorrelation, stack_and_group
from .errors import ShapeError, ValidationError
from .fem import EnhancedFeaturePair
from .tensor import ACC, Tensor, _result, uniform_init


def check_window(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise ValidationError(f"self-similarity window k must be a positive odd number, got {k}")
    return k


def local_self_similarity(e: Tensor, k: int) -> Tensor:
    """Dot products of each position with its k x k zero-padded neighbourhood.

    Output channel ``d`` holds offset ``(di, dj)`` in row-major order over
    ``[-t, t]^2`` with ``t = (k - 1) // 2``.
    """
    check_window(k)
    if e.ndim != 3:
        raise ShapeError(f"expected a [C,H,W] map, got {e.dims}")
    C, H, W = e.shape
    t = (k - 1) // 2
    x = e.data.astype(ACC)
    xp = T.zero_pad(x, ((0, 0), (t, t), (t, t)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [C, H, W, k, k]
    ss = np.einsum("chwij,chw->ijhw", win, x, optimize=True).reshape(k * k, H, W)

    def backward(g):
        g4 = g.reshape(k, k, H, W)
        gx = np.einsum("ijhw,chwij->chw", g4, win, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + H, j:j + W] += g4[i, j] * x
        return (gx + gxp[:, t:t + H, t:t + W],)

    return _result(ss, (e,), backward)


@dataclass
class CrmParams:
    """Stride-2 3x3 convolutions applied in sequence; len(convs) is the depth N."""

    convs: list[Tensor]

    @classmethod
    def init(cls, rng: np.random.Generator, k: int, depth: int = 2, width: int = 16) -> "CrmParams":
        check_window(k)
        if depth < 1:
            raise ValidationError(f"multi-scale depth must be >= 1, got {depth}")
        convs, cin = [], k * k
        for _ in range(depth):
            convs.append(Tensor(uniform_init(rng, (width, cin, 3, 3), cin * 9)))
            cin = width
        return cls(convs)

    @property
    def out_channels(self) -> int:
        return self.convs[0].shape[1] + sum(w.shape[0] for w in self.convs)

    def named(self, prefix: str):
        for i, w in enumerate(self.convs):
            yield f"{prefix}.conv{i + 1}", w


def multi_scale_guidance(ss: Tensor, params: CrmParams) -> Tensor:
    """SS concatenated with bilinearly upsampled outputs of each strided conv."""
    _, H, W = ss.shape
    if H < 2 or W < 2:
        raise ShapeError(f"self-similarity map {H}x{W} too small for stride-2 refinement")
    parts, cur = [ss], ss
    for w in params.convs:
        cur = T.relu(T.conv2d(cur, w, stride=2, pad=1))
        parts.append(T.upsample_bilinear(cur, H, W))
    return T.concat(parts, axis=0)


def multi_scale_context(e: Tensor, k: int, params: CrmParams) -> Tensor:
    return multi_scale_guidance(local_self_similarity(e, k), params)


def global_context_correlation(eq: Tensor, es: Tensor, k: int, params: CrmParams) -> Tensor:
    if eq.shape != es.shape:
        raise ShapeError(f"enhanced maps must share dims, got {eq.dims} and {es.dims}")
    return cosine_correlation(multi_scale_context(eq, k, params), multi_scale_context(es, k, params))


def crm_forward(
    enhanced: Sequence[EnhancedFeaturePair],
    dense_feats: Sequence[tuple[Tensor, Tensor, int]],
    k: int,
    params: Sequence[CrmParams] | None,
    support_mask: np.ndarray | None = None,
) -> CorrelationPyramid:
    """Per level: dense correlations followed by one global-context channel.

    ``dense_feats`` holds ``(fq, fs, level)`` triples. Passing ``params=None``
    drops the global-context channel; passing ``support_mask`` masks the
    dense support features (background filtering).
    """
    entries = []
    for fq, fs, level in dense_feats:
        if support_mask is None:
            entries.append((cosine_correlation(fq, fs), level))
        else:
            entries.append((masked_hypercorrelation(fq, fs, support_mask), level))
    if params is not None:
        if len(params) != len(enhanced):
            raise ShapeError(f"{len(enhanced)} enhanced pairs but {len(params)} CRM parameter sets")
        for level, (pair, p) in enumerate(zip(enhanced, params)):
            entries.append((global_context_correlation(pair.eq, pair.es, k, p), level))
    return stack_and_group(entries)
