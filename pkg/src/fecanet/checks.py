"""Production-vs-oracle pairings registered with :func:`fecanet.oracles.oracle_suite`.

Each check draws small seeded inputs, runs the production op (with ``delta``
added to one of its weights for mutation testing) and the loop oracle, and
returns ``(production, oracle)``.
"""
from __future__ import annotations

import numpy as np

from . import oracles as O
from . import tensor as T
from .correlation import cosine_correlation, masked_hypercorrelation
from .crm import CrmParams, global_context_correlation, local_self_similarity, multi_scale_guidance
from .decoder import DecoderParams, residual_decode
from .encoder4d import CenterPivotKernel, ConvLayer, EncoderParams, center_pivot_conv4d, encode_pyramid, \
    full_conv4d, plan_support_strides, squeeze_block
from .fem import FemParams, apply_channel_gate, channel_gate, cross_image_attention, fem_forward
from .correlation import CorrelationPyramid
from .oracles import COMPOSED_TOL, PURE_TOL, check
from .pipeline.metrics import MetricsAccumulator, fb_iou, miou
from .pipeline.train import KShotConfig, ce_loss, kshot_fuse
from .tensor import Tensor


def _t(a) -> Tensor:
    return Tensor(a)


def _fem_dict(p: FemParams, delta: float = 0.0) -> dict:
    d = {name: getattr(p, name).data.astype(np.float64) for name in
         ("proj_q", "proj_k", "proj_v", "trans_q", "trans_s", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")}
    return d


def _perturbed_fem(p: FemParams, delta: float) -> FemParams:
    if not delta:
        return p
    return FemParams(**{**p.__dict__, "proj_q": _t(p.proj_q.data + delta), "trans_q": _t(p.trans_q.data + delta)})


@check("matmul", PURE_TOL)
def _matmul(rng, delta):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    return T.matmul(_t(a + delta), _t(b)).data, O.matmul(a.astype(np.float32), b.astype(np.float32))


@check("softmax_axis", PURE_TOL)
def _softmax(rng, delta):
    x = rng.normal(size=(2, 3)).astype(np.float32)
    return T.softmax_axis(_t(x + delta * np.arange(3)), 1).data, O.softmax_rows(x)


@check("relu", PURE_TOL)
def _relu(rng, delta):
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    return T.relu(_t(x + delta)).data, O.relu(x)


@check("conv2d", PURE_TOL)
def _conv2d(rng, delta):
    x = rng.normal(size=(2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    return T.conv2d(_t(x), _t(w + delta), stride=2, pad=1).data, O.conv2d(x, w, 2, 1)


@check("upsample_bilinear", PURE_TOL)
def _upsample(rng, delta):
    x = rng.normal(size=(2, 3, 4)).astype(np.float32)
    return T.upsample_bilinear(_t(x + delta), 7, 9).data, O.bilinear(x, 7, 9)


@check("global_avg_pool", PURE_TOL)
def _gap(rng, delta):
    x = rng.normal(size=(3, 4, 5)).astype(np.float32)
    return T.global_avg_pool(_t(x + delta)).data, O.global_avg_pool(x)


@check("masked_hypercorrelation", PURE_TOL)
def _masked_corr(rng, delta):
    fq = rng.normal(size=(3, 3, 4)).astype(np.float32)
    fs = rng.normal(size=(3, 4, 3)).astype(np.float32)
    mask = (rng.uniform(size=(8, 6)) < 0.5).astype(np.uint8)
    mask[::2, ::2] |= np.eye(4, 3, dtype=np.uint8)  # keep the resized mask non-empty
    return masked_hypercorrelation(_t(fq + delta), _t(fs), mask).data, O.cosine_correlation(fq, fs, mask)


@check("cosine_correlation", PURE_TOL)
def _cosine(rng, delta):
    fq = rng.normal(size=(3, 2, 2)).astype(np.float32)
    fs = rng.normal(size=(3, 2, 2)).astype(np.float32)
    return cosine_correlation(_t(fq + delta), _t(fs)).data, O.cosine_correlation(fq, fs)


def _fem_case(rng, c=4, h=2, w=2):
    p = FemParams.init(rng, c, 2)
    fs = rng.normal(size=(c, h, w)).astype(np.float32)
    fq = rng.normal(size=(c, h, w)).astype(np.float32)
    return p, fs, fq


@check("attention_map", PURE_TOL)
def _attention(rng, delta):
    p, fs, fq = _fem_case(rng)
    _, _, maps = cross_image_attention(_t(fs), _t(fq), _perturbed_fem(p, delta))
    aq, as_, _, _ = O.cross_attention(fs, fq, _fem_dict(p))
    return np.stack([maps.aq.data, maps.as_.data]), np.stack([aq, as_])


@check("cross_image_aggregation", PURE_TOL)
def _aggregation(rng, delta):
    p, fs, fq = _fem_case(rng)
    pq, ps, _ = cross_image_attention(_t(fs), _t(fq), _perturbed_fem(p, delta))
    _, _, opq, ops = O.cross_attention(fs, fq, _fem_dict(p))
    return np.stack([pq.data, ps.data]), np.stack([opq, ops])


@check("channel_attention", PURE_TOL)
def _channel_att(rng, delta):
    p, f, pm = _fem_case(rng, 8, 3, 3)
    pp = FemParams(**{**p.__dict__, "mlp_w2": _t(p.mlp_w2.data + delta)})
    got = apply_channel_gate(_t(f), _t(pm), channel_gate(_t(f), pp)).data
    return got, O.channel_attention(f, pm, _fem_dict(p))


@check("fem_forward", COMPOSED_TOL)
def _fem(rng, delta):
    p, fs, fq = _fem_case(rng, 8, 2, 3)
    pair = fem_forward(_t(fs), _t(fq), _perturbed_fem(p, delta))
    es, eq = O.fem(fs, fq, _fem_dict(p))
    return np.stack([pair.es.data, pair.eq.data]), np.stack([es, eq])


@check("local_self_similarity", PURE_TOL)
def _self_sim(rng, delta):
    e = rng.normal(size=(2, 3, 3)).astype(np.float32)
    return local_self_similarity(_t(e + delta), 3).data, O.self_similarity(e, 3)


def _crm_case(rng, k=3, c=3, h=4, w=4):
    p = CrmParams.init(rng, k, 2, 4)
    return p, [w_.data.astype(np.float64) for w_ in p.convs]


def _perturbed_crm(p: CrmParams, delta: float) -> CrmParams:
    return CrmParams([_t(p.convs[0].data + delta)] + p.convs[1:]) if delta else p


@check("multi_scale_guidance", COMPOSED_TOL)
def _multi_scale(rng, delta):
    p, convs = _crm_case(rng)
    ss = np.abs(rng.normal(size=(9, 4, 4))).astype(np.float32)
    return multi_scale_guidance(_t(ss), _perturbed_crm(p, delta)).data, O.multi_scale(ss, convs)


@check("global_context_correlation", COMPOSED_TOL)
def _global_ctx(rng, delta):
    p, convs = _crm_case(rng)
    eq = rng.normal(size=(3, 4, 4)).astype(np.float32)
    es = rng.normal(size=(3, 4, 4)).astype(np.float32)
    got = global_context_correlation(_t(eq), _t(es), 3, _perturbed_crm(p, delta)).data
    return got, O.global_context(eq, es, 3, convs)


@check("full_conv4d", PURE_TOL)
def _full4d(rng, delta):
    x = rng.normal(size=(1, 4, 4, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 1, 3, 3, 3, 3)).astype(np.float32)
    return full_conv4d(_t(x), _t(w + delta), (1, 2), (1, 1)).data, O.full_conv4d(x, w, (1, 2), (1, 1))


@check("center_pivot_conv4d", COMPOSED_TOL)
def _cp4d(rng, delta):
    x = rng.normal(size=(2, 4, 4, 5, 5)).astype(np.float32)
    k = CenterPivotKernel.init(rng, 2, 2, 3, (1, 2))
    kp = CenterPivotKernel(_t(k.w_q.data + delta), k.w_s, k.stride)
    want = O.full_conv4d(x, O.sparsify(k.w_q.data, k.w_s.data), (1, 2), (1, 1))
    return center_pivot_conv4d(_t(x), kp).data, want


def _layer_dict(layer: ConvLayer) -> dict:
    d = {"w_q": layer.kernel.w_q.data, "w_s": layer.kernel.w_s.data}
    if layer.gamma is not None:
        d["gamma"], d["beta"] = layer.gamma.data, layer.beta.data
    return d


@check("squeeze_block", COMPOSED_TOL)
def _squeeze(rng, delta):
    x = np.abs(rng.normal(size=(2, 3, 3, 4, 4))).astype(np.float32)
    layers = [ConvLayer.init(rng, 2, 4, (1, 2)), ConvLayer.init(rng, 4, 4, (1, 1))]
    for lay in layers:
        lay.gamma = _t(rng.uniform(0.5, 1.5, size=4))
        lay.beta = _t(rng.normal(0, 0.1, size=4))
    want_layers = [_layer_dict(lay) for lay in layers]
    if delta:
        layers[0] = ConvLayer(CenterPivotKernel(_t(layers[0].kernel.w_q.data + delta), layers[0].kernel.w_s,
                                                layers[0].kernel.stride), layers[0].gamma, layers[0].beta)
    got = squeeze_block(_t(x), layers).data
    want = O.cp_layer(O.cp_layer(x, want_layers[0], 2), want_layers[1], 1)
    return got, want


@check("encode_pyramid", COMPOSED_TOL)
def _encode(rng, delta):
    dims = [(4, 4, 4, 4), (2, 2, 2, 2), (2, 2, 2, 2)]
    chans = [2, 3, 2]
    levels = [np.abs(rng.normal(size=(c,) + d)).astype(np.float32) for c, d in zip(chans, dims)]
    params = EncoderParams.init(rng, chans, widths=(4, 4, 8))
    plans = plan_support_strides([d[2:] for d in dims], 2)
    blocks = [[_layer_dict(l) for l in b] for b in params.squeeze]
    mix = [_layer_dict(l) for l in params.mix]
    mix_proj = [w.data for w in params.mix_proj]
    want = O.encode_pyramid(levels, blocks, plans, mix_proj, mix)
    if delta:
        params.mix_proj[0] = _t(params.mix_proj[0].data + delta)
    got = encode_pyramid(CorrelationPyramid([_t(l) for l in levels]), params).data
    return got, want


@check("residual_decode", COMPOSED_TOL)
def _decode(rng, delta):
    ctx = rng.normal(size=(3, 4, 4)).astype(np.float32)
    prior = rng.uniform(size=(1, 2, 2)).astype(np.float32)
    p = DecoderParams.init(rng, 3)
    want_p = {"stage_w": [w.data for w in p.stage_w], "stage_b": [b.data for b in p.stage_b],
              "head_w": p.head_w.data, "head_b": p.head_b.data}
    _, probs = O.residual_decode(ctx, prior, want_p, (8, 8))
    if delta:
        # shift only the foreground row; a shift of both rows cancels in the softmax
        p.head_w = _t(p.head_w.data + delta * (np.arange(2) == 1)[:, None, None, None])
    got = residual_decode(_t(ctx), prior, p, (8, 8)).probs.data
    return got, probs


@check("cross_entropy", PURE_TOL)
def _cross_entropy(rng, delta):
    logits = rng.normal(size=(2, 5, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    probs = probs.astype(np.float32)
    gt = rng.integers(0, 2, size=(5, 4)).astype(np.uint8)
    return ce_loss(_t(probs + delta), gt).data, np.array(O.cross_entropy(probs, gt))


@check("metrics", PURE_TOL)
def _metrics(rng, delta):
    pairs = [(rng.integers(0, 2, size=(6, 6)), rng.integers(0, 2, size=(6, 6)), int(c)) for c in (0, 1, 1, 2)]
    acc = MetricsAccumulator()
    for pred, gt, c in pairs:
        acc.update(pred, gt, c)
    return np.array([miou(acc) + delta, fb_iou(acc)]), np.array(O.miou_fbiou(pairs))


@check("kshot_fuse", PURE_TOL)
def _kshot(rng, delta):
    preds = [rng.uniform(size=(5, 5)).astype(np.float32) for _ in range(3)]
    got = kshot_fuse([p + delta * 50 for p in preds], KShotConfig(3, 0.5))
    return got, O.kshot(preds, 0.5)
