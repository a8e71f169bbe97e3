"""Brute-force float64 reference implementations and the oracle comparison suite.

Everything here is written as explicit loops over plain numpy arrays and
deliberately avoids the production kernels, so agreement between the two is
evidence rather than tautology. Inputs are kept small (<= 1e4 scalars).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

PURE_TOL = 1e-6
COMPOSED_TOL = 1e-5


# -- tensor core ------------------------------------------------------------
def matmul(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_rows(x):
    """Softmax of each row of a 2D array."""
    x = np.asarray(x, float)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = [math.exp(v) for v in x[i]]
        total = sum(row)
        out[i] = [v / total for v in row]
    return out


def relu(x):
    x = np.asarray(x, float)
    flat = [v if v > 0 else 0.0 for v in x.ravel()]
    return np.array(flat).reshape(x.shape)


def conv2d(x, w, stride=1, pad=0):
    x, w = np.asarray(x, float), np.asarray(w, float)
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for y in range(ho):
            for xx in range(wo):
                s = 0.0
                for cc in range(ci):
                    for i in range(kh):
                        for j in range(kw):
                            r, q = y * stride + i - pad, xx * stride + j - pad
                            if 0 <= r < h and 0 <= q < wd:
                                s += x[cc, r, q] * w[o, cc, i, j]
                out[o, y, xx] = s
    return out


def bilinear(x, out_h, out_w):
    """Half-pixel bilinear resize of the last two axes, evaluated point by point."""
    x = np.asarray(x, float)
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    flat = x.reshape(-1, h, w)
    out = np.zeros((flat.shape[0], out_h, out_w))

    def coord(o, n_in, n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        if src < 0:
            src = 0.0
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, src - lo

    for c in range(flat.shape[0]):
        for oy in range(out_h):
            y0, y1, fy = coord(oy, h, out_h)
            for ox in range(out_w):
                x0, x1, fx = coord(ox, w, out_w)
                top = flat[c, y0, x0] * (1 - fx) + flat[c, y0, x1] * fx
                bot = flat[c, y1, x0] * (1 - fx) + flat[c, y1, x1] * fx
                out[c, oy, ox] = top * (1 - fy) + bot * fy
    return out.reshape(lead + (out_h, out_w))


def global_avg_pool(x):
    x = np.asarray(x, float)
    return np.array([sum(x[c].ravel().tolist()) / x[c].size for c in range(x.shape[0])])


def group_norm(x, groups, gamma, beta, eps=1e-5):
    x = np.asarray(x, float)
    c = x.shape[0]
    per = c // groups
    out = np.zeros_like(x)
    for g in range(groups):
        vals = x[g * per:(g + 1) * per].ravel().tolist()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for cc in range(g * per, (g + 1) * per):
            out[cc] = (x[cc] - mu) / math.sqrt(var + eps) * gamma[cc] + beta[cc]
    return out


# -- correlation ------------------------------------------------------------
def nearest_resize(mask, h, w):
    mask = np.asarray(mask)
    H, W = mask.shape
    out = np.zeros((h, w), dtype=mask.dtype)
    for i in range(h):
        for j in range(w):
            out[i, j] = mask[min(i * H // h, H - 1), min(j * W // w, W - 1)]
    return out


def cosine_correlation(fq, fs, mask=None, eps=1e-8):
    fq, fs = np.asarray(fq, float), np.asarray(fs, float)
    c, hq, wq = fq.shape
    _, hs, ws = fs.shape
    if mask is not None:
        m = nearest_resize(mask, hs, ws)
        fs = fs * m[None]
    out = np.zeros((1, hq, wq, hs, ws))
    for a in range(hq):
        for b in range(wq):
            qv = fq[:, a, b].tolist()
            qn = math.sqrt(sum(v * v for v in qv))
            for d in range(hs):
                for e in range(ws):
                    sv = fs[:, d, e].tolist()
                    sn = math.sqrt(sum(v * v for v in sv))
                    dot = sum(p * q for p, q in zip(qv, sv))
                    out[0, a, b, d, e] = max(dot / ((qn + eps) * (sn + eps)), 0.0)
    return out


# -- feature enhancement ----------------------------------------------------
def cross_attention(fs, fq, p):
    """Returns (Aq, As, Pq, Ps) from explicit sums; p maps names to arrays."""
    fs, fq = np.asarray(fs, float), np.asarray(fq, float)
    c, h, w = fq.shape
    n = h * w
    Fq, Fs = fq.reshape(c, n), fs.reshape(c, n)
    Q, K = matmul(p["proj_q"], Fq), matmul(p["proj_k"], Fs)
    Vq, Vs = matmul(p["proj_v"], Fq), matmul(p["proj_v"], Fs)
    ck = Q.shape[0]
    aq = np.zeros((n, n))
    for j in range(n):
        logits = [sum(Q[t, i] * K[t, j] for t in range(ck)) for i in range(n)]
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        tot = sum(ex)
        for i in range(n):
            aq[j, i] = ex[i] / tot
    as_ = np.zeros((n, n))
    for j in range(n):
        for i in range(n):
            as_[j, i] = aq[i, j]
    agg_q, agg_s = np.zeros((ck, n)), np.zeros((ck, n))
    for j in range(n):
        for t in range(ck):
            agg_q[t, j] = sum(aq[j, i] * Vq[t, i] for i in range(n))
            agg_s[t, j] = sum(as_[j, i] * Vs[t, i] for i in range(n))
    pq = matmul(p["trans_q"], agg_q).reshape(c, h, w)
    ps = matmul(p["trans_s"], agg_s).reshape(c, h, w)
    return aq, as_, pq, ps


def channel_attention(f, pmap, p):
    f, pmap = np.asarray(f, float), np.asarray(pmap, float)
    pooled = global_avg_pool(f)
    w1, b1, w2, b2 = (np.asarray(p[k], float) for k in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"))
    hidden = [max(sum(w1[r, c] * pooled[c] for c in range(len(pooled))) + b1[r], 0.0) for r in range(w1.shape[0])]
    gate = []
    for r in range(w2.shape[0]):
        z = sum(w2[r, c] * hidden[c] for c in range(len(hidden))) + b2[r]
        gate.append(1.0 / (1.0 + math.exp(-z)))
    out = np.zeros_like(f)
    for c in range(f.shape[0]):
        out[c] = gate[c] * pmap[c] + f[c]
    return out


def fem(fs, fq, p):
    _, _, pq, ps = cross_attention(fs, fq, p)
    return channel_attention(fs, ps, p), channel_attention(fq, pq, p)


# -- correlation reconstruction --------------------------------------------
def self_similarity(e, k):
    e = np.asarray(e, float)
    c, h, w = e.shape
    t = (k - 1) // 2
    out = np.zeros((k * k, h, w))
    for i in range(h):
        for j in range(w):
            d = 0
            for di in range(-t, t + 1):
                for dj in range(-t, t + 1):
                    r, q = i + di, j + dj
                    if 0 <= r < h and 0 <= q < w:
                        out[d, i, j] = sum(e[cc, r, q] * e[cc, i, j] for cc in range(c))
                    d += 1
    return out


def multi_scale(ss, convs):
    ss = np.asarray(ss, float)
    _, h, w = ss.shape
    parts, cur = [ss], ss
    for wt in convs:
        cur = relu(conv2d(cur, wt, stride=2, pad=1))
        parts.append(bilinear(cur, h, w))
    return np.concatenate(parts, axis=0)


def global_context(eq, es, k, convs):
    return cosine_correlation(multi_scale(self_similarity(eq, k), convs),
                              multi_scale(self_similarity(es, k), convs))


# -- 4D convolution ---------------------------------------------------------
def full_conv4d(x, w, strides=(1, 1), pads=(0, 0)):
    """Nine nested loops over (out-ch, 4 output coords, in-ch, 4 kernel offsets)."""
    x, w = np.asarray(x, float), np.asarray(w, float)
    ci, hq, wq, hs, ws = x.shape
    co, _, a, b, c, d = w.shape
    (sq, ss), (pq, ps) = strides, pads
    dims = ((hq + 2 * pq - a) // sq + 1, (wq + 2 * pq - b) // sq + 1,
            (hs + 2 * ps - c) // ss + 1, (ws + 2 * ps - d) // ss + 1)
    out = np.zeros((co,) + dims)
    for o in range(co):
        for y0 in range(dims[0]):
            for y1 in range(dims[1]):
                for y2 in range(dims[2]):
                    for y3 in range(dims[3]):
                        s = 0.0
                        for i in range(ci):
                            for k0 in range(a):
                                r0 = y0 * sq + k0 - pq
                                if not 0 <= r0 < hq:
                                    continue
                                for k1 in range(b):
                                    r1 = y1 * sq + k1 - pq
                                    if not 0 <= r1 < wq:
                                        continue
                                    for k2 in range(c):
                                        r2 = y2 * ss + k2 - ps
                                        if not 0 <= r2 < hs:
                                            continue
                                        for k3 in range(d):
                                            r3 = y3 * ss + k3 - ps
                                            if 0 <= r3 < ws:
                                                s += x[i, r0, r1, r2, r3] * w[o, i, k0, k1, k2, k3]
                        out[o, y0, y1, y2, y3] = s
    return out


def sparsify(w_q, w_s):
    """Dense 6D kernel of a center-pivot pair; the doubly-centred tap comes from w_q only."""
    w_q, w_s = np.asarray(w_q, float), np.asarray(w_s, float)
    co, ci, kh, kw = w_q.shape
    ch, cw = kh // 2, kw // 2
    full = np.zeros((co, ci, kh, kw, kh, kw))
    for o in range(co):
        for i in range(ci):
            for a in range(kh):
                for b in range(kw):
                    full[o, i, a, b, ch, cw] += w_q[o, i, a, b]
                    if (a, b) != (ch, cw):
                        full[o, i, ch, cw, a, b] += w_s[o, i, a, b]
    return full


def cp_layer(x, layer, support_stride):
    """center-pivot conv (via the dense oracle) + optional group norm + ReLU."""
    kh = layer["w_q"].shape[2]
    y = full_conv4d(x, sparsify(layer["w_q"], layer["w_s"]), (1, support_stride), (kh // 2, kh // 2))
    if layer.get("gamma") is None:
        return y
    return relu(group_norm(y, 4, layer["gamma"], layer["beta"]))


def encode_pyramid(levels, blocks, strides, mix_proj, mix):
    """Composite of squeeze, top-down mixing and support averaging."""
    sq = []
    for x, block, plan in zip(levels, blocks, strides):
        for layer, s in zip(block, plan):
            x = cp_layer(x, layer, s)
        sq.append(x)
    mixed = sq[-1]
    for step, lvl in enumerate(range(len(sq) - 2, -1, -1)):
        finer = sq[lvl]
        c = mixed.shape[0]
        proj = matmul(mix_proj[step], mixed.reshape(c, -1)).reshape((mix_proj[step].shape[0],) + mixed.shape[1:])
        if proj.shape[1:3] != finer.shape[1:3]:
            moved = np.transpose(proj, (0, 3, 4, 1, 2))
            proj = np.transpose(bilinear(moved, finer.shape[1], finer.shape[2]), (0, 3, 4, 1, 2))
        mixed = cp_layer(finer + proj, mix[step], 1)
    co, hq, wq, hs, ws = mixed.shape
    out = np.zeros((co, hq, wq))
    for o in range(co):
        for a in range(hq):
            for b in range(wq):
                out[o, a, b] = sum(mixed[o, a, b].ravel().tolist()) / (hs * ws)
    return out


# -- decoder, loss, metrics, fusion ----------------------------------------
def residual_decode(ctx, prior, p, out_size):
    ctx = np.asarray(ctx, float)
    prior = np.asarray(prior, float).reshape((1,) + np.asarray(prior).shape[-2:])
    if prior.shape[1:] != ctx.shape[1:]:
        prior = bilinear(prior, ctx.shape[1], ctx.shape[2])
    x = np.concatenate([ctx, prior], axis=0)
    for w, b in zip(p["stage_w"], p["stage_b"]):
        y = conv2d(x, w, 1, w.shape[2] // 2) + np.asarray(b, float)[:, None, None]
        x = x + relu(y)
    coarse = conv2d(x, p["head_w"], 1, 1) + np.asarray(p["head_b"], float)[:, None, None]
    logits = bilinear(coarse, *out_size)
    probs = np.zeros_like(logits)
    for i in range(logits.shape[1]):
        for j in range(logits.shape[2]):
            a, b = logits[0, i, j], logits[1, i, j]
            m = max(a, b)
            ea, eb = math.exp(a - m), math.exp(b - m)
            probs[0, i, j], probs[1, i, j] = ea / (ea + eb), eb / (ea + eb)
    return logits, probs


def cross_entropy(probs, gt, floor=1e-12):
    probs, gt = np.asarray(probs, float), np.asarray(gt)
    total = 0.0
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            total -= math.log(max(probs[int(gt[i, j]), i, j], floor))
    return total


def confusion(pred, gt):
    tp = fn = fp = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif g:
            fn += 1
        elif p:
            fp += 1
        else:
            tn += 1
    return tp, fn, fp, tn


def miou_fbiou(pairs):
    """pairs: iterable of (pred, gt, class_id); returns (mIoU, FB-IoU)."""
    per_class: dict[int, list[int]] = {}
    fb = [0, 0, 0, 0]  # fg inter, fg union, bg inter, bg union
    for pred, gt, cls in pairs:
        tp, fn, fp, tn = confusion(pred, gt)
        acc = per_class.setdefault(cls, [0, 0, 0])
        acc[0] += tp
        acc[1] += fn
        acc[2] += fp
        fb[0] += tp
        fb[1] += tp + fn + fp
        fb[2] += tn
        fb[3] += tn + fn + fp
    ious = [a[0] / sum(a) for a in per_class.values() if sum(a) > 0]
    fbs = [fb[0] / fb[1]] if fb[1] else []
    fbs += [fb[2] / fb[3]] if fb[3] else []
    return sum(ious) / len(ious), sum(fbs) / len(fbs)


def kshot(preds, tau=0.5):
    preds = [np.asarray(p, float) for p in preds]
    h, w = preds[0].shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            out[i, j] = 1 if sum(p[i, j] for p in preds) / len(preds) > tau else 0
    return out


# -- comparison suite -------------------------------------------------------
@dataclass
class OracleReport:
    op: str
    seed: int
    max_abs: float
    max_rel: float
    tol: float
    passed: bool


def compare(op: str, seed: int, got, want, tol: float) -> OracleReport:
    """max_rel is the max abs difference over the largest oracle magnitude."""
    got, want = np.asarray(got, float), np.asarray(want, float)
    if got.shape != want.shape:
        return OracleReport(op, seed, math.inf, math.inf, tol, False)
    max_abs = float(np.max(np.abs(got - want))) if got.size else 0.0
    scale = float(np.max(np.abs(want))) if want.size else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    return OracleReport(op, seed, max_abs, max_rel, tol, bool(max_rel <= tol))


def reports_to_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2)


_CHECKS: dict[str, tuple[float, Callable]] = {}


def check(name: str, tol: float):
    def deco(fn):
        _CHECKS[name] = (tol, fn)
        return fn
    return deco


def registered_checks() -> list[str]:
    return list(_CHECKS)


def oracle_suite(seed: int = 0, perturb: str | None = None, only=None) -> list[OracleReport]:
    """Compare each production op with its loop oracle on seeded inputs.

    ``perturb`` names a check whose production-side weights get +1e-2, which
    must make that check fail (mutation test).
    """
    from . import checks  # noqa: F401  (registers the checks)

    out = []
    for name, (tol, fn) in _CHECKS.items():
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng([seed, len(out)])
        delta = 1e-2 if name == perturb else 0.0
        got, want = fn(rng, delta)
        out.append(compare(name, seed, got, want, tol))
    return out
