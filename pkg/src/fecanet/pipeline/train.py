"""Loss, optimiser, K-shot fusion, training step and episodic evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .. import tensor as T
from ..decoder import MemoryBank, PredictionMap
from ..errors import ShapeError, ValidationError
from ..tensor import ParamSet, Tensor, grad_eval
from .episode import Episode
from .metrics import MetricsAccumulator, fb_iou, miou

PROB_FLOOR = 1e-12


def ce_loss(pred: PredictionMap | Tensor, gt: np.ndarray, reduction: str = "sum") -> Tensor:
    """Two-class pixel cross-entropy, summed (default) or averaged over pixels."""
    probs = pred.probs if isinstance(pred, PredictionMap) else pred
    gt = np.asarray(gt)
    if probs.ndim != 3 or probs.shape[0] != 2 or probs.shape[1:] != gt.shape:
        raise ShapeError(f"probabilities {probs.dims} do not match ground truth {list(gt.shape)}")
    onehot = np.stack([gt == 0, gt == 1]).astype(np.float64)
    total = T.mul(T.sum_(T.mul(T.log(T.clamp_min(probs, PROB_FLOOR)), Tensor(onehot))), -1.0)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return T.mul(total, 1.0 / gt.size)
    raise ValidationError(f"unknown reduction {reduction!r}")


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


def batch_loss(model, batch: Sequence[Episode], bank: MemoryBank | None) -> Tensor:
    """Mean over episodes of the per-pixel mean cross-entropy."""
    total = None
    for ep in batch:
        loss = ce_loss(model.forward(ep, 0, bank), ep.query_mask, reduction="mean")
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(batch))


def train_step(model, batch: Sequence[Episode], optimizer: Adam, bank: MemoryBank | None) -> float:
    if not batch:
        raise ValidationError("empty training batch")
    holder = {}

    def loss_fn(params: ParamSet) -> Tensor:
        holder["loss"] = batch_loss(model, batch, bank)
        return holder["loss"]

    grads = grad_eval(loss_fn, model.params)
    optimizer.step(model.params, grads)
    return holder["loss"].item()


@dataclass
class KShotConfig:
    shots: int = 1
    tau: float = 0.5

    def __post_init__(self):
        if self.shots < 1:
            raise ValidationError(f"K must be >= 1, got {self.shots}")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")


def kshot_fuse(preds: Sequence[np.ndarray], cfg: KShotConfig | None = None) -> np.ndarray:
    """Average K foreground maps (max vote = K) and threshold at tau."""
    cfg = cfg or KShotConfig()
    if len(preds) == 0:
        raise ValidationError("kshot_fuse needs at least one prediction")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    if stack.ndim != 3:
        raise ShapeError(f"predictions must be 2D maps of equal dims, got {stack.shape}")
    # sorting along K makes the sum independent of input order
    score = np.sort(stack, axis=0).sum(axis=0) / len(preds)
    return (score > cfg.tau).astype(np.uint8)


class Predictor(Protocol):
    def predict_fg(self, ep: Episode, support_index: int, bank: MemoryBank | None) -> np.ndarray: ...


@dataclass
class EvalResult:
    miou: float
    fb_iou: float
    per_class: dict[int, float] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def report(self) -> dict:
        return {"miou": self.miou, "fb_iou": self.fb_iou,
                "per_class_iou": {str(c): v for c, v in sorted(self.per_class.items())}}


def evaluate(episodes: Sequence[Episode], model: Predictor, cfg: KShotConfig | None = None,
             bank: MemoryBank | None = None) -> EvalResult:
    """K forward passes per episode (supports in manifest order), fused and scored.

    A fresh bank is used unless one is passed in.
    """
    cfg = cfg or KShotConfig()
    bank = MemoryBank() if bank is None else bank
    acc = MetricsAccumulator()
    masks = {}
    for ep in episodes:
        if ep.shots < cfg.shots:
            raise ValidationError(f"episode {ep.query_id!r} has {ep.shots} supports, {cfg.shots} requested")
        preds = [model.predict_fg(ep, i, bank) for i in range(cfg.shots)]
        mask = kshot_fuse(preds, cfg)
        masks[ep.query_id] = mask
        acc.update(mask, ep.query_mask, ep.class_id)
    return EvalResult(miou(acc), fb_iou(acc), acc.class_iou(), masks)


def fit(model, episodes: Sequence[Episode], steps: int, lr: float = 1e-3, batch_size: int = 4,
        bank: MemoryBank | None = None, seed: int = 0, log=None,
        target_loss: float | None = None) -> list[float]:
    """Adam training over fixed episodes; batches cycle through a seeded permutation.

    With ``target_loss`` set, training stops after the first step whose batch
    loss falls below it.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    order: list[int] = []
    losses = []
    for step in range(steps):
        batch = []
        while len(batch) < min(batch_size, len(episodes)):
            if not order:
                order = list(rng.permutation(len(episodes)))
            batch.append(episodes[order.pop(0)])
        loss = train_step(model, batch, opt, bank)
        losses.append(loss)
        if log is not None:
            log(step, loss)
        if target_loss is not None and loss < target_loss:
            break
    return losses
