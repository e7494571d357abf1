"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary."""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cfrg.config import Config, desk_config
from cfrg.distill import cosine_distance, distill_loss
from cfrg.features import WEIGHT_FILES, weights_dir
from cfrg.infer import fuse_and_smooth
from cfrg.metrics import auroc, average_precision, pro_curve
from cfrg.model import CFRG
from cfrg.recovery import recovery_loss
from cfrg.seghead import bce_loss
from cfrg.train import (
    MVTEC_TARGET_MEAN,
    MVTEC_TOLERANCE,
    ablation_config,
    build_model,
    evaluate,
    reproduce_benchmark,
    train,
)
from oracles import ap_thresholds, auroc_pairs, pro_exhaustive, random_metric_instance


def _record(log, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    log.append(line)
    print(line)
    return ok


def _valid_instance(rng, **kw):
    while True:
        maps, masks = random_metric_instance(rng, **kw)
        flat_y = np.concatenate([g.ravel() for g in masks])
        if 0 < flat_y.sum() < flat_y.size:
            return maps, masks, np.concatenate([m.ravel() for m in maps]), flat_y


def test_criterion_1_metric_oracles(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"auroc": 0.0, "ap": 0.0, "pro": 0.0}
    for _ in range(200):
        _, _, s, y = _valid_instance(rng, max_side=64)
        worst["auroc"] = max(worst["auroc"], abs(auroc(s, y) - auroc_pairs(s, y)))
        worst["ap"] = max(worst["ap"], abs(average_precision(s, y) - ap_thresholds(s, y)))
    for _ in range(200):
        # quantized scores keep the sweep below the quantile cap, where the curve is exact
        maps, masks, _, _ = _valid_instance(rng, max_side=64, levels=64)
        worst["pro"] = max(worst["pro"], abs(pro_curve(maps, masks) - pro_exhaustive(maps, masks)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and elapsed < 60
    detail = ", ".join(f"max |{k} - oracle| = {v:.1e}" for k, v in worst.items())
    assert _record(acceptance_log, 1, ok, f"{detail} (tol 1e-9); 200 instances each; {elapsed:.1f} s < 60 s")


def _fd_relative_error(loss_fn, tensors, rng, n_probe=40, h=1e-6):
    """Relative error between autograd and central differences on sampled coordinates."""
    leaves = [t.clone().requires_grad_(True) for t in tensors]
    loss_fn(leaves).backward()
    analytic, numeric = [], []
    for k, t in enumerate(tensors):
        flat = t.reshape(-1)
        for i in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
            vals = []
            for step in (h, -h):
                probe = [x.clone() for x in tensors]
                probe[k].reshape(-1)[i] += step
                vals.append(loss_fn(probe).item())
            numeric.append((vals[0] - vals[1]) / (2 * h))
            analytic.append(leaves[k].grad.reshape(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


def test_criterion_2_loss_correctness(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    cfg = desk_config()
    res = cfg.train.resolution
    shapes = [(2, c, res // s, res // s) for c, s in zip(cfg.model.desk_teacher_channels, (4, 8, 16))]
    teacher = [torch.tensor(rng.normal(size=s)) for s in shapes]
    student = [torch.tensor(rng.normal(size=s)) for s in shapes]
    mask = torch.tensor((rng.random((2, 1, res, res)) > 0.7).astype(np.float64))
    errors = {
        "L_dis": _fd_relative_error(lambda s: distill_loss(cosine_distance(teacher, s), mask), student, rng),
        "L_rec": _fd_relative_error(lambda r: recovery_loss(r, teacher), student, rng),
        "L_bce": _fd_relative_error(
            lambda p: bce_loss(p[0], mask), [torch.tensor(rng.uniform(0.02, 0.98, (2, 1, res, res)))], rng
        ),
    }
    ln2 = bce_loss(torch.full((4, 4), 0.5, dtype=torch.float64), (torch.rand(4, 4) > 0.5).double()).item()
    zero_d = [torch.zeros(1, s, s, dtype=torch.float64) for s in (32, 16, 8)]
    three = distill_loss(zero_d, torch.ones(1, 1, 128, 128)).item()
    fixtures_ok = abs(ln2 - math.log(2)) <= 1e-6 and abs(three - 3.0) <= 1e-6
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-2 and fixtures_ok and elapsed < 60
    detail = ", ".join(f"{k} rel err {v:.1e}" for k, v in errors.items())
    assert _record(
        acceptance_log, 2, ok,
        f"{detail} (tol 1e-2); BCE(0.5) = {ln2:.7f} vs ln 2; all-anomalous L_dis = {three:.7f} vs 3; "
        f"{elapsed:.1f} s < 60 s",
    )


def test_criterion_3_toy_convergence(acceptance_log, mini_index, desk_cfg):
    start = time.perf_counter()
    assert len(mini_index.split("train")) >= 50
    assert desk_cfg.train.epochs <= 10
    untrained = evaluate(build_model(desk_cfg), desk_cfg, "plate", mini_index)
    trained = evaluate(train(desk_cfg, "plate", index=mini_index).model, desk_cfg, "plate", mini_index)
    elapsed = time.perf_counter() - start
    ok = (
        trained.i_auroc >= 0.90 and trained.p_auroc >= 0.90
        and untrained.i_auroc <= 0.6 and untrained.p_auroc <= 0.6 and elapsed < 600
    )
    assert _record(
        acceptance_log, 3, ok,
        f"trained I-AUROC {trained.i_auroc:.3f}, P-AUROC {trained.p_auroc:.3f} (>= 0.90); "
        f"untrained I-AUROC {untrained.i_auroc:.3f}, P-AUROC {untrained.p_auroc:.3f} (<= 0.6); "
        f"{desk_cfg.train.epochs} epochs; {elapsed:.0f} s < 600 s",
    )


def test_criterion_4_ablation_ordering(acceptance_log, mini_index, desk_cfg):
    start = time.perf_counter()
    means = {}
    for variant in ("full", "ws", "wrc"):
        reports = []
        for seed in (0, 1, 2):
            cfg = ablation_config(desk_cfg, variant, seed)
            reports.append(evaluate(train(cfg, "plate", index=mini_index).model, cfg, "plate", mini_index))
        means[variant] = {m: float(np.mean([getattr(r, m) for r in reports])) for m in ("i_auroc", "p_pro")}
    elapsed = time.perf_counter() - start
    pro_ok = means["full"]["p_pro"] >= means["ws"]["p_pro"]
    iau_ok = means["wrc"]["i_auroc"] <= means["full"]["i_auroc"]
    ok = pro_ok and iau_ok and elapsed < 3600
    assert _record(
        acceptance_log, 4, ok,
        f"P-PRO full {means['full']['p_pro']:.4f} >= WS {means['ws']['p_pro']:.4f}: {pro_ok}; "
        f"I-AUROC WRC {means['wrc']['i_auroc']:.4f} <= full {means['full']['i_auroc']:.4f}: {iau_ok}; "
        f"3 seeds; {elapsed:.0f} s < 3600 s",
    )


def test_criterion_5_mvtec_reproduction(acceptance_log):
    root = os.environ.get("CFRG_MVTEC_ROOT")
    cfg = Config().replace(train__data_root=root or "")
    have_weights = all((weights_dir(cfg) / f).is_file() for f in WEIGHT_FILES.values())
    if not root or not have_weights:
        acceptance_log.append("criterion 5: SKIP | long-run reproduction needs CFRG_MVTEC_ROOT and cached "
                              "ImageNet weights; run scripts/reproduce_mvtec.py")
        pytest.skip("MVTec-AD root or pretrained weights unavailable")
    start = time.perf_counter()
    mean = reproduce_benchmark(cfg, out_dir=Path(cfg.train.output_dir) / "mvtec")[-1]
    gaps = {m: abs(getattr(mean, m) - v) for m, v in MVTEC_TARGET_MEAN.items()}
    ok = max(gaps.values()) <= MVTEC_TOLERANCE
    detail = ", ".join(f"{m} {getattr(mean, m):.3f} vs {v:.3f}" for m, v in MVTEC_TARGET_MEAN.items())
    assert _record(acceptance_log, 5, ok, f"{detail} (tol 0.01); {time.perf_counter() - start:.0f} s")


def test_criterion_6_determinism_and_resume(acceptance_log, mini_index, desk_cfg, tmp_path):
    start = time.perf_counter()
    cfg = desk_cfg.replace(train__epochs=2, train__milestones=(1,))
    full = train(cfg, "plate", tmp_path / "a", index=mini_index)
    part = train(cfg, "plate", tmp_path / "b", index=mini_index, stop_after=1)
    epoch0_a = [r for r in full.losses if r["epoch"] == 0]
    exact = epoch0_a == part.losses
    resumed = train(cfg, "plate", tmp_path / "b", index=mini_index, resume=tmp_path / "b" / "checkpoint_epoch001.pt")
    tail = [r for r in full.losses if r["epoch"] == 1]
    keys = ("l_all", "l_dis", "l_rec", "l_bce")
    worst = max(abs(x[k] - y[k]) for x, y in zip(tail, resumed.losses) for k in keys)
    ok = exact and len(tail) == len(resumed.losses) and worst <= 1e-5
    assert _record(
        acceptance_log, 6, ok,
        f"epoch-0 losses identical across reruns: {exact}; resumed vs uninterrupted max per-step gap "
        f"{worst:.1e} (tol 1e-5) over {len(tail)} steps; {time.perf_counter() - start:.0f} s",
    )


def test_criterion_7_inference_contract(acceptance_log):
    sigma = 4.0
    impulse = np.zeros((65, 65))
    impulse[32, 32] = 1.0
    peak = fuse_and_smooth(impulse, np.zeros_like(impulse), sigma=sigma).pixel_scores[32, 32]
    target = 1 / (2 * math.pi * sigma**2)
    rng = np.random.default_rng(77)
    violations = 0
    for _ in range(100):
        rec, seg = rng.random((32, 32)), rng.random((32, 32))
        base = fuse_and_smooth(rec, seg, sigma).image_score
        target_map = rec if rng.random() < 0.5 else seg
        i, j = rng.integers(0, 32, 2)
        target_map[i, j] += rng.uniform(0, 3)
        violations += fuse_and_smooth(rec, seg, sigma).image_score < base
    ok = abs(peak - target) <= 1e-4 and violations == 0
    assert _record(
        acceptance_log, 7, ok,
        f"impulse peak {peak:.6f} vs 1/(2 pi sigma^2) = {target:.6f} (tol 1e-4); "
        f"monotonicity violations {violations}/100",
    )
