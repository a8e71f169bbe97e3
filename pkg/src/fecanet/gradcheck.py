"""Central-difference gradient checks for the trainable modules.

Everything runs in float64 so that a step of 1e-3 leaves the truncation
error, not the rounding error, as the dominant term. Each module is checked
through a staged loss: inputs produced upstream of the module are computed
once and frozen, which leaves the gradient with respect to that module's
parameters unchanged while keeping the number of forward passes small.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .correlation import CorrelationPyramid
from .crm import crm_forward
from .decoder import residual_decode
from .encoder4d import encode_pyramid
from .fem import EnhancedFeaturePair
from .tensor import Tensor

MODULES = ("fem", "crm", "enc", "dec")


@dataclass
class TensorCheck:
    name: str
    coords: int
    max_abs: float
    rel_err: float
    skipped: int = 0


@dataclass
class GradCheckReport:
    checks: list[TensorCheck] = field(default_factory=list)
    seconds: float = 0.0

    def per_module(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for c in self.checks:
            mod = c.name.split(".")[0].rstrip("0123456789")
            out[mod] = max(out.get(mod, 0.0), c.rel_err)
        return out

    @property
    def max_rel_err(self) -> float:
        return max((c.rel_err for c in self.checks), default=0.0)

    def table(self) -> str:
        rows = [f"{'module':<8}{'tensors':>8}{'coords':>8}{'redrawn':>9}{'max rel err':>14}"]
        stats: dict[str, list[int]] = {}
        for c in self.checks:
            mod = c.name.split(".")[0].rstrip("0123456789")
            s = stats.setdefault(mod, [0, 0, 0])
            s[0], s[1], s[2] = s[0] + 1, s[1] + c.coords, s[2] + c.skipped
        for mod, err in self.per_module().items():
            n, k, r = stats[mod]
            rows.append(f"{mod:<8}{n:>8}{k:>8}{r:>9}{err:>14.3e}")
        return "\n".join(rows)


def _frozen(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def _frozen_pyramid(pyr: CorrelationPyramid) -> CorrelationPyramid:
    return CorrelationPyramid([_frozen(lv) for lv in pyr.levels])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; two all-zero vectors agree exactly."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_check(cfg: RunConfig | None = None, seed: int = 7, image_size: int = 24,
                   step: float = 1e-3, coords: int = 20, modules=MODULES,
                   max_tries: int = 4) -> GradCheckReport:
    """Compare backprop against central differences on a toy episode.

    A coordinate whose +/- step interval flips any ReLU or clamp is redrawn
    (up to ``max_tries * coords`` draws per tensor): across a kink the
    central difference measures a secant, not the derivative.
    """
    from .pipeline.episode import synthetic_episodes
    from .pipeline.model import FecaNet
    from .pipeline.train import ce_loss

    start = time.perf_counter()
    cfg = (cfg or RunConfig()).replace(seed=seed, image_size=image_size)
    model = FecaNet(cfg)
    model.cast_(np.float64)
    ep = synthetic_episodes(1, image_size, seed=seed)[0]
    image, mask = ep.supports[0]
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    with T.precision(np.float64):
        fq_all = model.backbone.features(ep.query_image)
        fs_all = model.backbone.features(image)
        dense = [(fq, fs, lvl) for lvl in range(3) for fq, fs in zip(fq_all[lvl], fs_all[lvl])]
        crm_mask = None if cfg.keep_background else mask
        with T.no_grad():
            enhanced = [EnhancedFeaturePair(_frozen(p.es), _frozen(p.eq))
                        for p in model.enhanced_pairs(fq_all, fs_all, mask)]
            pyr = _frozen_pyramid(crm_forward(enhanced, dense, cfg.k, model.crm, crm_mask))
            ctx = _frozen(encode_pyramid(pyr, model.encoder))
        prior = rng.uniform(size=(1,) + ctx.shape[1:])

        def from_ctx(c):
            # the prior is copied per call so nothing can leak between evaluations
            return ce_loss(residual_decode(c, prior.copy(), model.decoder, ep.size), ep.query_mask, "mean")

        def from_pyr(p):
            return from_ctx(encode_pyramid(p, model.encoder))

        def from_enhanced(e):
            return from_pyr(crm_forward(e, dense, cfg.k, model.crm, crm_mask))

        stages = {
            "fem": lambda: from_enhanced(model.enhanced_pairs(fq_all, fs_all, mask)),
            "crm": lambda: from_enhanced(enhanced),
            "enc": lambda: from_pyr(pyr),
            "dec": lambda: from_ctx(ctx),
        }
        for mod in modules:
            names = [n for n in model.params if n.split(".")[0].rstrip("0123456789") == mod]
            if not names:
                continue
            loss_fn = stages[mod]
            model.params.zero_grad()
            loss_fn().backward()
            grads = {n: model.params[n].grad.copy() for n in names}
            with T.no_grad():
                for n in names:
                    p = model.params[n]
                    flat = p.data.reshape(-1)
                    order = rng.permutation(flat.size)
                    idx, numeric, skipped = [], [], 0
                    for i in order[:max_tries * coords]:
                        if len(idx) == min(coords, flat.size):
                            break
                        keep = flat[i]
                        flat[i] = keep + step
                        with T.record_kinks() as k_up:
                            up = loss_fn().item()
                        flat[i] = keep - step
                        with T.record_kinks() as k_down:
                            down = loss_fn().item()
                        flat[i] = keep
                        if any((a != b).any() for a, b in zip(k_up, k_down)):
                            skipped += 1  # the interval straddles a ReLU kink
                            continue
                        idx.append(i)
                        numeric.append((up - down) / (2 * step))
                    analytic = grads[n].reshape(-1)[idx]
                    numeric = np.asarray(numeric)
                    report.checks.append(TensorCheck(
                        n, len(idx), float(np.abs(analytic - numeric).max(initial=0.0)),
                        relative_error(analytic, numeric), skipped))
    report.seconds = time.perf_counter() - start
    return report
