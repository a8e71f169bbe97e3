"""Acceptance criteria, one test (and one printed PASS/FAIL line) each."""
import itertools
import subprocess
import sys
import time

import numpy as np

from fecanet import oracles as O
from fecanet import tensor as T
from fecanet.config import RunConfig
from fecanet.crm import local_self_similarity
from fecanet.decoder import MemoryBank
from fecanet.encoder4d import CenterPivotKernel, center_pivot_conv4d, full_conv4d, pivot_equivalence
from fecanet.fem import FemParams, cross_image_attention
from fecanet.gradcheck import gradient_check
from fecanet.oracles import oracle_suite, registered_checks
from fecanet.pipeline import (FecaNet, KShotConfig, MetricsAccumulator, evaluate, fb_iou, fit, kshot_fuse,
                              miou, synthetic_episodes)
from fecanet.tensor import Tensor

# tolerances and budgets
PIVOT_TOL, PIVOT_BUDGET_S = 1e-5, 10.0
GRAD_TOL, GRAD_BUDGET_S = 1e-3, 60.0
ORACLE_BUDGET_S = 30.0
SS_TOL = 1e-6
OVERFIT_STEPS, OVERFIT_LOSS, OVERFIT_MIOU, OVERFIT_BUDGET_S = 500, 0.05, 0.95, 300.0
# training stops once a batch loss is this small; well inside the step budget
OVERFIT_STOP = 0.01


def test_criterion_01_center_pivot_equivalence(acceptance):
    start = time.perf_counter()
    diffs = pivot_equivalence(seed=0, cases=24)
    # the largest admissible shape, every stride combination
    rng = np.random.default_rng(99)
    for stride in itertools.product((1, 2), repeat=2):
        kern = CenterPivotKernel.init(rng, 2, 3, 3, stride)
        x = Tensor(rng.normal(size=(2, 6, 6, 6, 6)))
        got = center_pivot_conv4d(x, kern).data
        want = full_conv4d(x, kern.sparsified(), stride, (1, 1)).data
        diffs.append(float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - start
    worst = max(diffs)
    ok = worst < PIVOT_TOL and elapsed < PIVOT_BUDGET_S and len(diffs) >= 20
    acceptance.record(1, "center-pivot == full 4D conv", ok,
                      f"{len(diffs)} inputs, max abs diff {worst:.2e} (< {PIVOT_TOL}), {elapsed:.2f}s (< {PIVOT_BUDGET_S}s)")
    assert ok


def test_criterion_02_gradient_integrity(acceptance):
    report = gradient_check(seed=7, image_size=24, step=1e-3, coords=20)
    per_mod = report.per_module()
    print(report.table())
    ok = (set(per_mod) == {"fem", "crm", "enc", "dec"} and report.max_rel_err < GRAD_TOL
          and report.seconds < GRAD_BUDGET_S)
    detail = ", ".join(f"{m} {e:.1e}" for m, e in per_mod.items())
    acceptance.record(2, "finite-difference gradients", ok,
                      f"max rel err {detail} (< {GRAD_TOL}), {report.seconds:.1f}s (< {GRAD_BUDGET_S}s)")
    assert ok


def test_criterion_03_oracle_suite(acceptance):
    start = time.perf_counter()
    reports = oracle_suite(seed=0)
    elapsed = time.perf_counter() - start
    failed = [r.op for r in reports if not r.passed]
    ok = not failed and len(reports) == len(registered_checks()) and elapsed < ORACLE_BUDGET_S
    worst = max(r.max_rel / r.tol for r in reports)
    acceptance.record(3, "64-bit oracle suite", ok,
                      f"{len(reports) - len(failed)}/{len(reports)} within tolerance "
                      f"(worst at {worst:.1e} of its budget), {elapsed:.2f}s (< {ORACLE_BUDGET_S}s)"
                      + (f"; failing: {failed}" if failed else ""))
    assert ok


def test_criterion_04_attention_transpose(acceptance):
    mismatches = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c, h, w = int(rng.integers(5, 17)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        params = FemParams.init(rng, c)
        fs, fq = Tensor(rng.normal(size=(c, h, w))), Tensor(rng.normal(size=(c, h, w)))
        _, _, maps = cross_image_attention(fs, fq, params)
        mismatches += not np.array_equal(maps.as_.data, maps.aq.data.T)
    ok = mismatches == 0
    acceptance.record(4, "As == Aq^T bit-exact", ok, f"{100 - mismatches}/100 seeded FEM instances identical")
    assert ok


def test_criterion_05_self_similarity_contract(acceptance):
    const = local_self_similarity(Tensor(np.ones((2, 5, 5))), 3).data
    interior_ok = np.array_equal(const[:, 2, 2], np.full(9, 2.0))
    corner = const[:, 0, 0].reshape(3, 3)
    outside = np.concatenate([corner[0, :], corner[1:, 0]])
    border_ok = np.array_equal(outside, np.zeros(5)) and np.all(corner[1:, 1:] == 2.0)
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in (3, 5):
        e = rng.normal(size=(2, 3, 3))
        want = O.self_similarity(e, k)
        worst = max(worst, float(np.abs(local_self_similarity(Tensor(e), k).data - want).max() / np.abs(want).max()))
    ep = synthetic_episodes(1, 32, seed=3)[0]
    swept = []
    for k, depth in [(k, 2) for k in (3, 5, 7, 9)] + [(5, n) for n in (1, 2, 3, 4)]:
        model = FecaNet(RunConfig(seed=1, k=k, depth=depth))
        pred = model.predict_fg(ep, 0, MemoryBank())
        swept.append(pred.shape == ep.query_mask.shape and np.isfinite(pred).all())
    ok = interior_ok and border_ok and worst < SS_TOL and all(swept)
    acceptance.record(5, "self-similarity contract and k/N sweeps", ok,
                      f"constant map exact={interior_ok}, border zeros exact={border_ok}, "
                      f"random-map rel err {worst:.1e} (< {SS_TOL}), k in {{3,5,7,9}} and N in {{1..4}}: "
                      f"{sum(swept)}/8 ran")
    assert ok


def test_criterion_06_overfit(acceptance):
    start = time.perf_counter()
    episodes = synthetic_episodes(4, 32, seed=0)
    model = FecaNet(RunConfig(seed=0))
    losses = fit(model, episodes, OVERFIT_STEPS, lr=1e-3, batch_size=4, bank=MemoryBank(),
                 target_loss=OVERFIT_STOP)
    result = evaluate(episodes, model, KShotConfig())
    elapsed = time.perf_counter() - start
    ok = (len(losses) <= OVERFIT_STEPS and losses[-1] < OVERFIT_LOSS and result.miou >= OVERFIT_MIOU
          and elapsed < OVERFIT_BUDGET_S)
    acceptance.record(6, "overfit 4 synthetic episodes", ok,
                      f"{len(losses)} Adam steps (<= {OVERFIT_STEPS}), final loss {losses[-1]:.4f} (< {OVERFIT_LOSS}), "
                      f"mIoU {result.miou:.4f} (>= {OVERFIT_MIOU}), FB-IoU {result.fb_iou:.4f}, "
                      f"{elapsed:.0f}s (< {OVERFIT_BUDGET_S:.0f}s)")
    assert ok


def test_criterion_07_metric_hand_cases(acceptance):
    gt = np.array([[1, 1], [0, 0]])
    perfect = MetricsAccumulator().update(gt, gt, 0)
    disjoint = MetricsAccumulator().update(1 - gt, gt, 0)
    half = MetricsAccumulator().add_counts(0, tp=2, fn=2, fp=0)
    got = (miou(perfect), fb_iou(perfect), miou(disjoint), fb_iou(disjoint), miou(half))
    ok = got == (1.0, 1.0, 0.0, 0.0, 0.5)
    acceptance.record(7, "metric hand cases exact", ok,
                      f"perfect (mIoU, FB-IoU)={got[:2]}, disjoint={got[2:4]}, TP=2/FN=2/FP=0 mIoU={got[4]}")
    assert ok


def test_criterion_08_kshot_behaviour(acceptance):
    perm_ok = dup_ok = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        k = int(rng.integers(2, 6))
        preds = [rng.uniform(size=(7, 9)) for _ in range(k)]
        base = kshot_fuse(preds, KShotConfig(k))
        shuffled = [preds[i] for i in rng.permutation(k)]
        perm_ok += np.array_equal(base, kshot_fuse(shuffled, KShotConfig(k)))
        dup_ok += np.array_equal(kshot_fuse([preds[0]] * k, KShotConfig(k)), kshot_fuse(preds[:1]))
    tau = KShotConfig().tau
    ok = perm_ok == 100 and dup_ok == 100 and tau == 0.5
    acceptance.record(8, "K-shot fusion", ok,
                      f"permutation-invariant {perm_ok}/100, duplicate-idempotent {dup_ok}/100, default tau {tau}")
    assert ok


def test_criterion_09_ablation_lattice(acceptance):
    episodes = synthetic_episodes(2, 32, seed=4)
    done = []
    for fem, gc, keep, bank in itertools.product((True, False), repeat=4):
        cfg = RunConfig(seed=2, fem=fem, gc=gc, keep_background=keep, bank=bank)
        model = FecaNet(cfg)
        losses = fit(model, episodes, 3, batch_size=2, bank=MemoryBank() if bank else None)
        result = evaluate(episodes, model, KShotConfig())
        done.append(len(losses) == 3 and np.isfinite(losses).all() and 0.0 <= result.miou <= 1.0)
    ok = all(done) and len(done) == 16
    acceptance.record(9, "ablation lattice", ok, f"{sum(done)}/16 configurations trained 3 steps and evaluated")
    assert ok


def _cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "fecanet.cli", *args], cwd=cwd, capture_output=True, check=True)


def test_criterion_10_determinism(acceptance, tmp_path):
    _cli("export-fixtures", "--out", "fx", "--seed", "3", cwd=tmp_path)
    outputs = []
    for run in ("a", "b"):
        _cli("train", "--manifest", "fx/manifest.json", "--seed", "11", "--steps", "6", "--out", f"{run}.ck",
             "--loss-log", f"{run}.csv", "--save-bank", cwd=tmp_path)
        _cli("eval", "--manifest", "fx/manifest.json", "--checkpoint", f"{run}.ck", "--out", f"{run}.json",
             "--masks-dir", f"{run}_masks", cwd=tmp_path)
        files = [f"{run}.ck", f"{run}.csv", f"{run}.json"] + sorted(
            f"{run}_masks/{p.name}" for p in (tmp_path / f"{run}_masks").iterdir())
        outputs.append([(tmp_path / f).read_bytes() for f in files])
    a, b = outputs
    ok = len(a) == len(b) and all(x == y for x, y in zip(a, b)) and len(a) > 3
    acceptance.record(10, "byte-identical train + eval", ok,
                      f"{len(a)} artifacts (checkpoint, loss log, metrics, {len(a) - 3} masks) compared across two runs")
    assert ok
