"""4D convolutional pyramid encoder over correlation tensors [C, Hq, Wq, Hs, Ws].

The workhorse is the center-pivot 4D convolution, which runs as two batched
2D convolutions: one over the query plane with the support offset pinned to
the kernel centre, one over the support plane with the query offset pinned.
:func:`full_conv4d` is the dense reference used to check it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .correlation import CorrelationPyramid
from .errors import ShapeError
from .tensor import ACC, Tensor, uniform_init

GN_GROUPS = 4


def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {k} does not fit extent {n} with pad {pad}")
    return out


def full_conv4d(x: Tensor, weights: Tensor, strides=(1, 1), pads=(0, 0)) -> Tensor:
    """Dense 4D convolution (forward only, not differentiable).

    ``weights`` has dims ``[Cout, Cin, kh, kw, kh', kw']``; the first kernel
    pair spans the query plane, the second the support plane. ``strides`` and
    ``pads`` are (query, support) pairs.
    """
    if x.ndim != 5 or weights.ndim != 6:
        raise ShapeError(f"full_conv4d expects [C,Hq,Wq,Hs,Ws] and 6D weights, got {x.dims}, {weights.dims}")
    co, ci, kqh, kqw, ksh, ksw = weights.shape
    if ci != x.shape[0]:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {ci}")
    if any(k % 2 == 0 for k in (kqh, kqw, ksh, ksw)):
        raise ShapeError(f"kernel extents must be odd, got {weights.dims[2:]}")
    (sq, ss), (pq, ps) = strides, pads
    _, hq, wq, hs, ws = x.shape
    out = (_out_len(hq, kqh, sq, pq), _out_len(wq, kqw, sq, pq), _out_len(hs, ksh, ss, ps), _out_len(ws, ksw, ss, ps))
    xp = T.zero_pad(x.data, ((0, 0), (pq, pq), (pq, pq), (ps, ps), (ps, ps)), ACC)
    win = sliding_window_view(xp, (kqh, kqw, ksh, ksw), axis=(1, 2, 3, 4))
    win = win[:, ::sq, ::sq, ::ss, ::ss][:, :out[0], :out[1], :out[2], :out[3]]
    y = np.einsum("cabdeijkl,ocijkl->oabde", win, weights.data.astype(ACC), optimize=True)
    T._count("full_conv4d", co * ci * kqh * kqw * ksh * ksw * math.prod(out))
    return Tensor(y)


@dataclass
class CenterPivotKernel:
    """Query-plane and support-plane 2D kernels, each [Cout, Cin, kh, kw].

    The doubly-centred tap belongs to ``w_q``; the centre of ``w_s`` is
    masked to zero so it never contributes and never receives gradient.
    """

    w_q: Tensor
    w_s: Tensor
    stride: tuple[int, int] = (1, 1)  # (query, support)

    @classmethod
    def init(cls, rng: np.random.Generator, cin: int, cout: int, k: int = 3, stride=(1, 1)) -> "CenterPivotKernel":
        fan = cin * 2 * k * k
        return cls(Tensor(uniform_init(rng, (cout, cin, k, k), fan)),
                   Tensor(uniform_init(rng, (cout, cin, k, k), fan)), tuple(stride))

    @property
    def ksize(self) -> tuple[int, int]:
        return self.w_q.shape[2], self.w_q.shape[3]

    def sparsified(self) -> Tensor:
        """Equivalent dense 6D kernel (zero off the two pivot planes)."""
        wq, ws = self.w_q.data.astype(ACC), self.w_s.data.astype(ACC).copy()
        co, ci, kh, kw = wq.shape
        ch, cw = kh // 2, kw // 2
        ws[:, :, ch, cw] = 0.0
        full = np.zeros((co, ci, kh, kw, kh, kw))
        full[:, :, :, :, ch, cw] += wq
        full[:, :, ch, cw, :, :] += ws
        return Tensor(full)


def _support_center_mask(kh: int, kw: int) -> np.ndarray:
    m = np.ones((1, 1, kh, kw))
    m[0, 0, kh // 2, kw // 2] = 0.0
    return m


def center_pivot_conv4d(x: Tensor, kernel: CenterPivotKernel, pads=None) -> Tensor:
    """Center-pivot 4D convolution of x [Cin, Hq, Wq, Hs, Ws]; pads default to k//2."""
    if x.ndim != 5:
        raise ShapeError(f"expected [C,Hq,Wq,Hs,Ws], got {x.dims}")
    co, ci, kh, kw = kernel.w_q.shape
    if kernel.w_s.shape != kernel.w_q.shape:
        raise ShapeError(f"pivot kernels differ: {kernel.w_q.dims} vs {kernel.w_s.dims}")
    if ci != x.shape[0]:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {ci}")
    sq, ss = kernel.stride
    pq, ps = (kh // 2, kh // 2) if pads is None else pads
    _, hq, wq, hs, ws = x.shape
    hq_o, wq_o = _out_len(hq, kh, sq, pq), _out_len(wq, kw, sq, pq)
    hs_o, ws_o = _out_len(hs, kh, ss, ps), _out_len(ws, kw, ss, ps)
    ch, cw = kh // 2, kw // 2

    # query branch: sample support plane at pivot positions, convolve query plane
    xs = T.pad(x, ((0, 0), (0, 0), (0, 0), (ps, ps), (ps, ps)))
    xs = T.getitem(xs, (slice(None), slice(None), slice(None),
                        slice(ch, ch + ss * hs_o, ss), slice(cw, cw + ss * ws_o, ss)))
    xs = T.reshape(T.transpose(xs, (3, 4, 0, 1, 2)), (hs_o * ws_o, ci, hq, wq))
    yq = T.conv2d_nchw(xs, kernel.w_q, stride=sq, pad=pq)
    yq = T.transpose(T.reshape(yq, (hs_o, ws_o, co, hq_o, wq_o)), (2, 3, 4, 0, 1))

    # support branch: sample query plane at pivot positions, convolve support plane
    xq = T.pad(x, ((0, 0), (pq, pq), (pq, pq), (0, 0), (0, 0)))
    xq = T.getitem(xq, (slice(None), slice(ch, ch + sq * hq_o, sq), slice(cw, cw + sq * wq_o, sq)))
    xq = T.reshape(T.transpose(xq, (1, 2, 0, 3, 4)), (hq_o * wq_o, ci, hs, ws))
    w_s = T.mul(kernel.w_s, _support_center_mask(kh, kw))
    ysp = T.conv2d_nchw(xq, w_s, stride=ss, pad=ps)
    ysp = T.transpose(T.reshape(ysp, (hq_o, wq_o, co, hs_o, ws_o)), (2, 0, 1, 3, 4))
    return T.add(yq, ysp)


def conv4d_1x1(x: Tensor, w: Tensor) -> Tensor:
    """Channel mixing with a [Cout, Cin] matrix."""
    c = x.shape[0]
    y = T.matmul(w, T.reshape(x, (c, -1)))
    return T.reshape(y, (w.shape[0],) + x.shape[1:])


@dataclass
class ConvLayer:
    kernel: CenterPivotKernel
    gamma: Tensor | None = None
    beta: Tensor | None = None

    @classmethod
    def init(cls, rng, cin: int, cout: int, stride=(1, 1), norm: bool = True) -> "ConvLayer":
        kernel = CenterPivotKernel.init(rng, cin, cout, 3, stride)
        if not norm:
            return cls(kernel)
        return cls(kernel, Tensor(np.ones(cout)), Tensor(np.zeros(cout)))

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.kernel.w_q
        yield f"{prefix}.w_s", self.kernel.w_s
        if self.gamma is not None:
            yield f"{prefix}.gn_gamma", self.gamma
            yield f"{prefix}.gn_beta", self.beta


def apply_layer(x: Tensor, layer: ConvLayer, support_stride: int | None = None) -> Tensor:
    kernel = layer.kernel
    if support_stride is not None and support_stride != kernel.stride[1]:
        kernel = CenterPivotKernel(kernel.w_q, kernel.w_s, (kernel.stride[0], support_stride))
    y = center_pivot_conv4d(x, kernel)
    if layer.gamma is None:
        return y
    return T.relu(T.group_norm(y, GN_GROUPS, layer.gamma, layer.beta))


def squeeze_block(x: Tensor, layers: Sequence[ConvLayer], support_strides: Sequence[int] | None = None) -> Tensor:
    """Center-pivot convs that keep query dims and shrink support dims."""
    if x.ndim != 5:
        raise ShapeError(f"expected [C,Hq,Wq,Hs,Ws], got {x.dims}")
    if x.shape[3] < 2 or x.shape[4] < 2:
        raise ShapeError(f"support dims {x.dims[3:]} too small to squeeze")
    strides = support_strides or [None] * len(layers)
    for layer, s in zip(layers, strides):
        x = apply_layer(x, layer, s)
    return x


def plan_support_strides(support_sizes: Sequence[tuple[int, int]], n_layers: int) -> list[list[int]]:
    """Stride-2 layers until each level reaches half the coarsest support size."""
    target = tuple(max(1, math.ceil(min(s[d] for s in support_sizes) / 2)) for d in range(2))
    plans = []
    for size in support_sizes:
        cur, plan = list(size), []
        for _ in range(n_layers):
            if cur[0] > target[0] or cur[1] > target[1]:
                plan.append(2)
                cur = [math.ceil(c / 2) for c in cur]
            else:
                plan.append(1)
        if tuple(cur) != target:
            raise ShapeError(f"support dims {size} cannot reach {target} in {n_layers} squeeze layers")
        plans.append(plan)
    return plans


def upsample_query(x: Tensor, hq: int, wq: int) -> Tensor:
    """Bilinear resize of the query plane of a [C,Hq,Wq,Hs,Ws] tensor."""
    if x.shape[1:3] == (hq, wq):
        return x
    moved = T.transpose(x, (0, 3, 4, 1, 2))
    return T.transpose(T.resize_bilinear(moved, hq, wq), (0, 3, 4, 1, 2))


@dataclass
class EncoderParams:
    squeeze: list[list[ConvLayer]]
    mix_proj: list[Tensor]             # coarse -> fine channel matching, one per mixing step
    mix: list[ConvLayer] = field(default_factory=list)

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: Sequence[int], widths=(16, 32, 64),
             layers_per_block: int = 2) -> "EncoderParams":
        squeeze = []
        for cin, width in zip(in_channels, widths):
            block, c = [], cin
            for _ in range(layers_per_block):
                block.append(ConvLayer.init(rng, c, width))
                c = width
            squeeze.append(block)
        mix_proj, mix = [], []
        for lvl in range(len(widths) - 1, 0, -1):
            hi, lo = widths[lvl], widths[lvl - 1]
            mix_proj.append(Tensor(uniform_init(rng, (lo, hi), hi)))
            mix.append(ConvLayer.init(rng, lo, lo))
        return cls(squeeze, mix_proj, mix)

    @property
    def out_channels(self) -> int:
        return self.mix[-1].kernel.w_q.shape[0] if self.mix else self.squeeze[0][-1].kernel.w_q.shape[0]

    def named(self, prefix: str):
        for i, block in enumerate(self.squeeze):
            for j, layer in enumerate(block):
                yield from layer.named(f"{prefix}.sq{i}.{j}")
        for i, (w, layer) in enumerate(zip(self.mix_proj, self.mix)):
            yield f"{prefix}.mix{i}.proj", w
            yield from layer.named(f"{prefix}.mix{i}")


def encode_pyramid(pyr: CorrelationPyramid, params: EncoderParams) -> Tensor:
    """Squeeze each level, mix top-down, average the support plane away -> [C_enc, Hq, Wq]."""
    if len(pyr) != len(params.squeeze):
        raise ShapeError(f"pyramid has {len(pyr)} levels, encoder expects {len(params.squeeze)}")
    n_layers = len(params.squeeze[0])
    plans = plan_support_strides([lv.shape[3:] for lv in pyr], n_layers)
    squeezed = [squeeze_block(lv, block, plan) for lv, block, plan in zip(pyr, params.squeeze, plans)]
    mixed = squeezed[-1]
    for step, lvl in enumerate(range(len(squeezed) - 2, -1, -1)):
        finer = squeezed[lvl]
        up = upsample_query(conv4d_1x1(mixed, params.mix_proj[step]), finer.shape[1], finer.shape[2])
        mixed = apply_layer(T.add(finer, up), params.mix[step])
    return T.mean(mixed, axis=(3, 4))


def pivot_equivalence(seed: int, cases: int = 20, max_dims=(2, 6, 6, 6, 6), k: int = 3) -> list[float]:
    """Max abs difference between the pivot conv and the dense conv of its sparsified kernel.

    One entry per seeded case; dims, output channels and strides vary per case.
    """
    diffs = []
    for case in range(cases):
        rng = np.random.default_rng([seed, case])
        dims = tuple(int(rng.integers(1 if i == 0 else k, m + 1)) for i, m in enumerate(max_dims))
        stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        kern = CenterPivotKernel.init(rng, dims[0], int(rng.integers(1, 4)), k, stride)
        x = Tensor(rng.normal(size=dims))
        got = center_pivot_conv4d(x, kern).data
        want = full_conv4d(x, kern.sparsified(), stride, (k // 2, k // 2)).data
        diffs.append(float(np.abs(got.astype(ACC) - want).max()))
    return diffs
