"""Feature enhancement: cross-image spatial attention and intra-image channel attention.

Projections named ``*_q``/``*_k``/``*_v``/``trans_*`` are 1x1 convolutions,
stored as ``[Cout, Cin]`` matrices and applied to the flattened ``[C, H*W]``
map. Each pyramid level owns its own :class:`FemParams`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, uniform_init


def key_channels(c_l: int) -> int:
    return min(max(c_l // 8, 4), c_l - 1)


@dataclass
class FemParams:
    proj_q: Tensor   # [Ck, Cl]
    proj_k: Tensor   # [Ck, Cl]
    proj_v: Tensor   # [Ck, Cl], shared by both branches
    trans_q: Tensor  # [Cl, Ck]
    trans_s: Tensor  # [Cl, Ck]
    mlp_w1: Tensor   # [Cl/r, Cl]
    mlp_b1: Tensor   # [Cl/r]
    mlp_w2: Tensor   # [Cl, Cl/r]
    mlp_b2: Tensor   # [Cl]

    @classmethod
    def init(cls, rng: np.random.Generator, c_l: int, c_k: int | None = None, ratio: int = 4) -> "FemParams":
        c_k = key_channels(c_l) if c_k is None else c_k
        if not 1 <= c_k < c_l:
            raise ShapeError(f"key channels {c_k} must be below feature channels {c_l}")
        hidden = max(c_l // ratio, 1)
        shapes = {
            "proj_q": ((c_k, c_l), c_l), "proj_k": ((c_k, c_l), c_l), "proj_v": ((c_k, c_l), c_l),
            "trans_q": ((c_l, c_k), c_k), "trans_s": ((c_l, c_k), c_k),
            "mlp_w1": ((hidden, c_l), c_l), "mlp_b1": ((hidden,), c_l),
            "mlp_w2": ((c_l, hidden), hidden), "mlp_b2": ((c_l,), hidden),
        }
        return cls(**{k: Tensor(uniform_init(rng, s, fan)) for k, (s, fan) in shapes.items()})

    @classmethod
    def zeros_like(cls, other: "FemParams") -> "FemParams":
        return cls(**{f.name: Tensor(np.zeros(getattr(other, f.name).shape)) for f in fields(cls)})

    def named(self, prefix: str):
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)


@dataclass
class AttentionMaps:
    aq: Tensor  # [N, N], indexed (support j, query i)
    as_: Tensor


@dataclass
class EnhancedFeaturePair:
    es: Tensor
    eq: Tensor
    maps: AttentionMaps | None = None


def _proj(w: Tensor, x: Tensor) -> Tensor:
    return T.matmul(w, x)


def cross_image_attention(fs: Tensor, fq: Tensor, params: FemParams):
    """Returns (Pq, Ps, AttentionMaps); P maps are projected back to C_l channels."""
    if fs.ndim != 3 or fs.shape != fq.shape:
        raise ShapeError(f"support/query features must share [C,H,W] dims, got {fs.dims} and {fq.dims}")
    C, H, W = fq.shape
    N = H * W
    flat_q = T.reshape(fq, (C, N))
    flat_s = T.reshape(fs, (C, N))
    q = _proj(params.proj_q, flat_q)
    k = _proj(params.proj_k, flat_s)
    # logits[j, i] = K_j . Q_i; normalise over the query index i
    aq = T.softmax_axis(T.matmul(T.transpose(k), q), axis=1)
    as_ = T.transpose(aq)
    vq = _proj(params.proj_v, flat_q)
    vs = _proj(params.proj_v, flat_s)
    agg_q = T.matmul(vq, T.transpose(aq))   # column j = sum_i Aq[j,i] Vq[:, i]
    agg_s = T.matmul(vs, T.transpose(as_))
    pq = T.reshape(_proj(params.trans_q, agg_q), (C, H, W))
    ps = T.reshape(_proj(params.trans_s, agg_s), (C, H, W))
    return pq, ps, AttentionMaps(aq, as_)


def channel_gate(f: Tensor, params: FemParams) -> Tensor:
    """sigmoid(MLP(global average pool of f)), one weight per channel."""
    pooled = T.reshape(T.global_avg_pool(f), (f.shape[0], 1))
    hidden = T.relu(T.add(T.matmul(params.mlp_w1, pooled), T.reshape(params.mlp_b1, (-1, 1))))
    out = T.add(T.matmul(params.mlp_w2, hidden), T.reshape(params.mlp_b2, (-1, 1)))
    return T.reshape(T.sigmoid(out), (f.shape[0],))


def apply_channel_gate(f: Tensor, p: Tensor, gate: Tensor) -> Tensor:
    """E = Expand(gate) * P + f."""
    if p.shape != f.shape:
        raise ShapeError(f"projected map {p.dims} must match features {f.dims}")
    if gate.shape != (f.shape[0],):
        raise ShapeError(f"gate must have {f.shape[0]} entries, got {gate.dims}")
    return T.add(T.mul(T.reshape(gate, (-1, 1, 1)), p), f)


def channel_attention(f: Tensor, p: Tensor, params: FemParams) -> Tensor:
    return apply_channel_gate(f, p, channel_gate(f, params))


def fem_forward(fs: Tensor, fq: Tensor, params: FemParams) -> EnhancedFeaturePair:
    pq, ps, maps = cross_image_attention(fs, fq, params)
    es = channel_attention(fs, ps, params)
    eq = channel_attention(fq, pq, params)
    return EnhancedFeaturePair(es=es, eq=eq, maps=maps)
