"""Training, evaluation and ablation runs."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, RandomSampler

from .config import ABLATION_VARIANTS, AblationFlags, Config, config_from_dict
from .dataset import DatasetIndex, EvalDataset, TrainDataset, scan_layout
from .errors import ConfigError, NumericError
from .infer import AnomalyScoreMap, fuse_and_smooth
from .metrics import MetricsReport, evaluate_category, mean_report
from .model import CFRG
from .synth import TextureBank

log = logging.getLogger(__name__)


def lr_at_epoch(epoch: int, base_lr: float, milestones, gamma: float) -> float:
    """Learning rate in force during 1-indexed ``epoch``."""
    return base_lr * gamma ** sum(epoch > m for m in milestones)


def tensor_digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def teacher_digest(model: CFRG) -> str:
    return tensor_digest(model.teacher.state_dict().values())


def build_model(cfg: Config) -> CFRG:
    torch.manual_seed(cfg.train.seed)
    return CFRG(cfg)


@dataclass
class TrainResult:
    model: CFRG
    checkpoint: Path | None
    losses: list[dict] = field(default_factory=list)


def save_checkpoint(path: Path, model: CFRG, optimizer, scheduler, epoch: int) -> None:
    state = {
        "model": model.trainable_state_dict(),
        "optimizer": optimizer.state_dict(),
        "scheduler": scheduler.state_dict(),
        "epoch": epoch,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "teacher_digest": teacher_digest(model),
        "rng": {"torch": torch.random.get_rng_state(), "numpy": np.random.get_state()},
    }
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, cfg: Config | None = None, allow_mismatch: bool = False):
    """Return ``(model, checkpoint_dict)``; builds the model from ``cfg`` or the stored config."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    stored = config_from_dict(ckpt["config"])
    if cfg is None:
        cfg = stored
    elif cfg.hash() != ckpt["config_hash"]:
        msg = f"config hash {cfg.hash()} differs from checkpoint {ckpt['config_hash']} ({path})"
        if not allow_mismatch:
            raise ConfigError(msg + "; pass allow_mismatch / --force to proceed")
        warnings.warn(msg)
        log.warning(msg)
    model = CFRG(cfg)
    model.load_trainable_state_dict(ckpt["model"])
    if ckpt.get("teacher_digest") and teacher_digest(model) != ckpt["teacher_digest"]:
        log.warning("teacher weights differ from those used in training (%s)", path)
    return model, ckpt


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0]))
    return g


def train(
    cfg: Config,
    category: str,
    out_dir: str | Path | None = None,
    index: DatasetIndex | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train one per-category model.

    ``stop_after`` ends the run early after that many completed epochs (the
    schedule still follows ``cfg.train.epochs``), which is how resume is tested.
    """
    if index is None:
        index = scan_layout(cfg.train.data_root, category)
    entries = index.split("train")
    textures = TextureBank.from_config(cfg.synth)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    params = model.trainable_parameters()
    optimizer = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, list(cfg.train.milestones), cfg.train.gamma)
    start_epoch = 0
    if resume is not None:
        model, ckpt = load_checkpoint(resume, cfg)
        params = model.trainable_parameters()
        optimizer = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, list(cfg.train.milestones), cfg.train.gamma)
        optimizer.load_state_dict(ckpt["optimizer"])
        scheduler.load_state_dict(ckpt["scheduler"])
        torch.random.set_rng_state(ckpt["rng"]["torch"])
        np.random.set_state(ckpt["rng"]["numpy"])
        start_epoch = ckpt["epoch"]
    initial_teacher = teacher_digest(model)

    dataset = TrainDataset(entries, cfg.train.resolution, cfg.synth, textures, seed=cfg.train.seed)
    log_fh = (out / "losses.jsonl").open("a" if resume else "w") if out is not None else None
    losses: list[dict] = []
    end_epoch = cfg.train.epochs if stop_after is None else min(cfg.train.epochs, stop_after)
    step = start_epoch * math.ceil(len(dataset) / cfg.train.batch_size)
    last_ckpt = Path(resume) if resume is not None else None
    try:
        for epoch in range(start_epoch, end_epoch):
            dataset.set_epoch(epoch)
            loader = DataLoader(
                dataset,
                batch_size=cfg.train.batch_size,
                sampler=RandomSampler(dataset, generator=_epoch_generator(cfg.train.seed, epoch)),
                num_workers=cfg.train.num_workers,
            )
            lambda_bce = 0.0 if cfg.train.training_mode == "two_stage" and epoch < cfg.train.stage1_epochs else None
            model.train()
            for batch in loader:
                parts = model.forward_train(batch["x_n"], batch["x_a"], batch["mask"], lambda_bce=lambda_bce)
                if not torch.isfinite(parts["l_all"]):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}: "
                                       f"{ {k: float(v.detach()) for k, v in parts.items()} }")
                optimizer.zero_grad(set_to_none=True)
                parts["l_all"].backward()
                optimizer.step()
                row = {"step": step, "epoch": epoch, **{k: float(v.detach()) for k, v in parts.items()},
                       "lr": optimizer.param_groups[0]["lr"]}
                losses.append(row)
                if log_fh is not None:
                    log_fh.write(json.dumps(row) + "\n")
                step += 1
            scheduler.step()
            if log_fh is not None:
                log_fh.flush()
            if out is not None:
                last_ckpt = out / f"checkpoint_epoch{epoch + 1:03d}.pt"
                save_checkpoint(last_ckpt, model, optimizer, scheduler, epoch + 1)
                save_checkpoint(out / "last.pt", model, optimizer, scheduler, epoch + 1)
            log.info("epoch %d done: mean l_all %.4f", epoch + 1,
                     np.mean([r["l_all"] for r in losses if r["epoch"] == epoch]))
    except NumericError:
        log.error("aborting; last good checkpoint: %s", last_ckpt)
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    assert teacher_digest(model) == initial_teacher, "teacher weights changed during training"
    return TrainResult(model, last_ckpt, losses)


# --------------------------------------------------------------------------- evaluation


@dataclass
class Predictions:
    source_ids: list[str]
    maps: list[AnomalyScoreMap]
    masks: list[np.ndarray]
    labels: list[int]


def predict(model: CFRG, entries, cfg: Config | None = None, batch_size: int = 16) -> Predictions:
    cfg = cfg or model.cfg
    model.eval()
    loader = DataLoader(EvalDataset(entries, cfg.train.resolution), batch_size=batch_size, shuffle=False)
    out = Predictions([], [], [], [])
    for batch in loader:
        maps = model.forward_infer(batch["image"])
        rec = maps.get("rec_map")
        seg = maps.get("seg_prob")
        for i in range(batch["image"].shape[0]):
            smap = fuse_and_smooth(
                None if rec is None else rec[i].numpy(),
                None if seg is None else seg[i].numpy(),
                cfg.infer.sigma,
                cfg.infer.image_score,
                cfg.infer.top_k,
            )
            out.source_ids.append(batch["source_id"][i])
            out.maps.append(smap)
            out.masks.append(batch["mask"][i, 0].numpy().astype(np.uint8))
            out.labels.append(int(batch["label"][i]))
    return out


def report_from_predictions(preds: Predictions, cfg: Config, category: str) -> MetricsReport:
    return evaluate_category(
        [m.pixel_scores for m in preds.maps],
        preds.masks,
        [m.image_score for m in preds.maps],
        preds.labels,
        category=category,
        fpr_limit=cfg.metrics.pro_fpr_limit,
        pool_pixels=cfg.metrics.pool_pixels,
        max_thresholds=cfg.metrics.pro_max_thresholds,
    )


def evaluate(model: CFRG, cfg: Config, category: str, index: DatasetIndex | None = None) -> MetricsReport:
    if index is None:
        index = scan_layout(cfg.train.data_root, category)
    return report_from_predictions(predict(model, index.split("test"), cfg), cfg, category)


def evaluate_checkpoints(cfg: Config, checkpoints: dict[str, str | Path], allow_mismatch: bool = False):
    """Per-category reports plus the cross-category mean row."""
    reports = []
    for category, path in checkpoints.items():
        model, _ = load_checkpoint(path, cfg, allow_mismatch)
        reports.append(evaluate(model, cfg, category))
    return reports + [mean_report(reports)]


# --------------------------------------------------------------------------- ablations


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: MetricsReport


def ablation_config(cfg: Config, variant: str, seed: int | None = None) -> Config:
    flags = AblationFlags.named(variant)
    overrides = {f"ablation.{k}": v for k, v in vars(flags).items()}
    if seed is not None:
        overrides["train.seed"] = seed
    from .config import apply_overrides

    return apply_overrides(cfg, overrides)


def ablation_matrix(
    cfg: Config,
    category: str,
    variants=ABLATION_VARIANTS,
    seeds=(0,),
    index: DatasetIndex | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    if index is None:
        index = scan_layout(cfg.train.data_root, category)
    rows = []
    for variant in variants:
        for seed in seeds:
            vcfg = ablation_config(cfg, variant, seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
            result = train(vcfg, category, run_dir, index=index)
            rows.append(AblationRow(variant, seed, evaluate(result.model, vcfg, category, index)))
            log.info("ablation %s seed %d: %s", variant, seed, rows[-1].report)
    return rows


def ablation_table(rows: list[AblationRow]) -> list[dict]:
    """One row per variant: seed-mean of the four metrics."""
    table = []
    for variant in dict.fromkeys(r.variant for r in rows):
        reps = [r.report for r in rows if r.variant == variant]
        mean = mean_report(reps, variant)
        table.append({"variant": variant, **{m: getattr(mean, m) for m in MetricsReport.METRICS}})
    return table


# --------------------------------------------------------------------------- benchmark reproduction

MVTEC_CATEGORIES = (
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut",
    "pill", "screw", "tile", "toothbrush", "transistor", "wood", "zipper",
)
# category-mean targets for the full configuration with pretrained backbones
MVTEC_TARGET_MEAN = {"p_auroc": 0.984, "i_auroc": 0.984, "p_pro": 0.956, "ap": 0.734}
MVTEC_TOLERANCE = 0.01


def reproduce_benchmark(cfg: Config, categories=MVTEC_CATEGORIES, out_dir: str | Path | None = None):
    """Train and evaluate one model per category; returns per-category reports plus the mean row."""
    reports = []
    for category in categories:
        run_dir = None if out_dir is None else Path(out_dir) / category
        index = scan_layout(cfg.train.data_root, category)
        result = train(cfg, category, run_dir, index=index)
        reports.append(evaluate(result.model, cfg, category, index))
        log.info("%s: %s", category, reports[-1])
    return reports + [mean_report(reports)]
