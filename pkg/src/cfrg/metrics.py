"""I-AUROC, P-AUROC, P-PRO and pixel AP."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import UndefinedMetricError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def auroc(scores, labels) -> float:
    """Mann-Whitney rank statistic; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over descending unique thresholds of (R_k - R_{k-1}) * P_k."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected component labels of a binary mask."""
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)
    return labels, int(n)


def pro_points(score_maps: Sequence[np.ndarray], masks: Sequence[np.ndarray], max_thresholds: int = 5000):
    """(fpr, mean_pro) along a descending threshold sweep, starting at (0, 0).

    Mean PRO at threshold t is a sum of per-pixel weights 1 / (n_regions * |region|)
    over defect pixels scoring >= t, so one sort yields the whole curve.
    """
    scores, pro_w, fpr_w = [], [], []
    n_regions = 0
    region_sizes = []
    labelled = []
    for smap, mask in zip(score_maps, masks):
        smap = np.asarray(smap, dtype=np.float64)
        mask = np.asarray(mask)
        if smap.shape != mask.shape:
            raise ValueError(f"score map {smap.shape} and mask {mask.shape} differ")
        lab, n = label_regions(mask)
        labelled.append((smap, lab, n_regions))
        sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
        region_sizes.append(sizes)
        n_regions += n
    n_neg = sum(int((lab == 0).sum()) for _, lab, _ in labelled)
    if n_regions == 0:
        raise UndefinedMetricError("P-PRO needs at least one defect region")
    if n_neg == 0:
        raise UndefinedMetricError("P-PRO needs at least one normal pixel")
    sizes = np.concatenate(region_sizes).astype(np.float64)
    for smap, lab, offset in labelled:
        flat = lab.ravel()
        scores.append(smap.ravel())
        w = np.zeros(flat.size)
        defect = flat > 0
        w[defect] = 1.0 / (n_regions * sizes[flat[defect] - 1 + offset])
        pro_w.append(w)
        fpr_w.append((~defect).astype(np.float64) / n_neg)
    s = np.concatenate(scores)
    order = np.argsort(-s, kind="mergesort")
    s = s[order]
    cum_pro = np.r_[0.0, np.cumsum(np.concatenate(pro_w)[order])]
    cum_fpr = np.r_[0.0, np.cumsum(np.concatenate(fpr_w)[order])]

    uniq = np.unique(s)[::-1]
    if uniq.size > max_thresholds:
        thresholds = np.quantile(s, np.linspace(1.0, 0.0, max_thresholds))
    else:
        thresholds = uniq
    # number of pixels with score >= t, with s sorted descending
    counts = np.searchsorted(-s, -thresholds, side="right")
    fpr = np.r_[0.0, cum_fpr[counts]]
    pro = np.r_[0.0, cum_pro[counts]]
    # cumulative sums can overshoot 1 by rounding
    return np.minimum(fpr, 1.0), np.minimum(pro, 1.0)


def integrate_limited(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under y(x) on [0, limit], interpolating at the limit."""
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and (~keep).any():
        j = np.flatnonzero(~keep)[0]
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        xs = np.r_[xs, limit]
        ys = np.r_[ys, y0 + (y1 - y0) * (limit - x0) / (x1 - x0)]
    return float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))


def pro_curve(score_maps, masks, fpr_limit: float = 0.3, max_thresholds: int = 5000) -> float:
    """Normalized area under the mean-PRO vs FPR curve up to ``fpr_limit``."""
    fpr, pro = pro_points(score_maps, masks, max_thresholds)
    return integrate_limited(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class MetricsReport:
    category: str
    i_auroc: float
    p_auroc: float
    p_pro: float
    ap: float
    n_images: int
    n_defect_images: int

    METRICS = ("i_auroc", "p_auroc", "p_pro", "ap")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        return cls(**json.loads(text))

    def as_row(self) -> dict:
        return asdict(self)


def _per_image_mean(fn, maps, masks) -> float:
    vals = []
    for m, g in zip(maps, masks):
        g = np.asarray(g).ravel()
        if 0 < g.sum() < g.size:
            vals.append(fn(np.asarray(m).ravel(), g))
    if not vals:
        raise UndefinedMetricError("no image has both normal and defect pixels")
    return float(np.mean(vals))


def evaluate_category(
    pixel_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    image_scores: Sequence[float],
    image_labels: Sequence[int],
    category: str = "",
    fpr_limit: float = 0.3,
    pool_pixels: bool = True,
    max_thresholds: int = 5000,
) -> MetricsReport:
    if not (len(pixel_maps) == len(masks) == len(image_scores) == len(image_labels)):
        raise ValueError("predictions and ground truth are not aligned")
    try:
        i_auroc = auroc(image_scores, image_labels)
        if pool_pixels:
            flat_s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
            flat_y = np.concatenate([np.asarray(g).ravel() > 0 for g in masks])
            p_auroc = auroc(flat_s, flat_y)
            ap = average_precision(flat_s, flat_y)
        else:
            p_auroc = _per_image_mean(auroc, pixel_maps, masks)
            ap = _per_image_mean(average_precision, pixel_maps, masks)
        p_pro = pro_curve(pixel_maps, masks, fpr_limit, max_thresholds)
    except UndefinedMetricError as exc:
        raise UndefinedMetricError(f"category {category!r}: {exc}") from exc
    return MetricsReport(
        category, i_auroc, p_auroc, p_pro, ap, len(pixel_maps), int(sum(int(l) > 0 for l in image_labels))
    )


def mean_report(reports: Sequence[MetricsReport], name: str = "mean") -> MetricsReport:
    return MetricsReport(
        name,
        *(float(np.mean([getattr(r, m) for r in reports])) for m in MetricsReport.METRICS),
        n_images=sum(r.n_images for r in reports),
        n_defect_images=sum(r.n_defect_images for r in reports),
    )
