"""Binary segmentation metrics: confusion counts, F-beta, F1, MAE, BER, AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError

BETA_SQ = 0.3
METRIC_NAMES = ("f_beta", "f1", "mae", "ber", "auc")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricReport:
    f_beta: float
    f1: float
    mae: float
    ber: float
    auc: float
    threshold: float
    pixels: int
    flags: list = field(default_factory=list)

    def as_dict(self):
        return asdict(self)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if pred.size and (pred.min() < 0 or pred.max() > 1 or not np.all(np.isfinite(pred))):
        raise DomainError("predictions must lie in [0, 1]")
    if not np.all((gt == 0) | (gt == 1)):
        raise DomainError("ground truth must be binary {0, 1}")
    return pred, gt.astype(bool)


def confusion(pred, gt, threshold=0.5):
    """Pixel counts with ``pred >= threshold`` taken as positive."""
    pred, gt = _check_pair(pred, gt)
    pos = pred >= threshold
    tp = int(np.count_nonzero(pos & gt))
    fp = int(np.count_nonzero(pos & ~gt))
    fn = int(np.count_nonzero(~pos & gt))
    tn = int(gt.size - tp - fp - fn)
    return Confusion(tp, tn, fp, fn)


def precision_recall(cm):
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    return precision, recall


def f_beta(cm, beta_sq=BETA_SQ):
    """(1 + b2) P R / (b2 P + R); 0 when precision or recall is undefined or zero."""
    p, r = precision_recall(cm)
    denom = beta_sq * p + r
    return (1 + beta_sq) * p * r / denom if denom > 0 else 0.0


def f1(cm):
    p, r = precision_recall(cm)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def mae(pred, gt):
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def ber(cm):
    """Balanced error rate in percent; NaN when either class is absent."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        return float("nan")
    return (1.0 - 0.5 * (cm.tp / (cm.tp + cm.fn) + cm.tn / (cm.tn + cm.fp))) * 100.0


def roc_curve(scores, gt):
    """(fpr, tpr) at every distinct score threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], gt[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    n_pos, n_neg = y.sum(), (~y).sum()
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return fpr, tpr


def auc(scores, gt):
    """Trapezoidal area under the ROC; NaN when only one class is present."""
    gt = np.asarray(gt)
    n_pos = int(np.count_nonzero(gt))
    if n_pos == 0 or n_pos == gt.size:
        return float("nan")
    fpr, tpr = roc_curve(scores, gt)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate_image(pred, gt, threshold=0.5, beta_sq=BETA_SQ):
    cm = confusion(pred, gt, threshold)
    flags = []
    if cm.tp + cm.fp == 0:
        flags.append("no_predicted_positives")
    if cm.tp + cm.fn == 0:
        flags.append("no_positives")
    b = ber(cm)
    a = auc(pred, gt)
    if np.isnan(b):
        flags.append("ber_undefined")
    if np.isnan(a):
        flags.append("auc_undefined")
    return MetricReport(
        f_beta=f_beta(cm, beta_sq),
        f1=f1(cm),
        mae=mae(pred, gt),
        ber=b,
        auc=a,
        threshold=threshold,
        pixels=cm.total,
        flags=flags,
    )


def evaluate_dataset(preds, gts, threshold=0.5, aggregate="per_image"):
    """Dataset-level metrics.

    ``per_image`` averages each image's scores (undefined BER/AUC images are
    skipped); ``pooled`` computes every metric once over all pixels.
    """
    if aggregate == "pooled":
        pred = np.concatenate([np.ravel(p) for p in preds])
        gt = np.concatenate([np.ravel(g) for g in gts])
        return evaluate_image(pred, gt, threshold)
    if aggregate != "per_image":
        raise DomainError(f"unknown aggregation {aggregate!r}")
    reports = [evaluate_image(p, g, threshold) for p, g in zip(preds, gts)]
    if not reports:
        raise DomainError("no images to evaluate")

    def avg(name):
        vals = [getattr(r, name) for r in reports if not np.isnan(getattr(r, name))]
        return float(np.mean(vals)) if vals else float("nan")

    flags = sorted({f for r in reports for f in r.flags})
    return MetricReport(
        f_beta=avg("f_beta"),
        f1=avg("f1"),
        mae=avg("mae"),
        ber=avg("ber"),
        auc=avg("auc"),
        threshold=threshold,
        pixels=int(sum(r.pixels for r in reports)),
        flags=flags,
    )
