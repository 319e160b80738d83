"""Five-band scores, pixel-level binary metrics and output-entropy measurements."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError
from .model import predict_logits
from .synthgen import CATEGORIES, NO_OBJECT, category_classes, category_of

BAND_TO_CLASS = np.array([0, 0, 1, 1, 2], dtype=np.int64)
FIVE_BAND_NOTE = "five equal-width bands on min-max-normalized |attribution|; bands {0,1}->0, {2,3}->1, {4}->2"

GROUPINGS = ("BG_VS_OBJECT", "NONFEATURE_VS_FEATURE")


def _safe_div(a, b) -> float:
    return float(a) / float(b) if b else 0.0


def ternary_confusion(attr01, mask) -> np.ndarray:
    """3x3 pixel counts, rows = predicted band class, columns = ground truth."""
    a = np.asarray(attr01, dtype=np.float64)
    m = np.asarray(mask)
    if a.shape != m.shape:
        raise ValidationError(f"attribution shape {a.shape} differs from mask shape {m.shape}")
    if a.size and (a.min() < 0 or a.max() > 1 or not np.all(np.isfinite(a))):
        raise ValidationError("normalized attribution must lie in [0, 1]")
    if m.size and (m.min() < 0 or m.max() > 2):
        raise ValidationError("mask must be ternary")
    band = np.clip(np.floor(a * 5).astype(np.int64), 0, 4)
    pred = BAND_TO_CLASS[band]
    return np.bincount((pred * 3 + m.astype(np.int64)).ravel(), minlength=9).reshape(3, 3)


@dataclass
class FiveBand:
    pixel_acc: float
    recall: float
    precision: float
    fpr: float

    def as_tuple(self):
        return (self.pixel_acc, self.recall, self.precision, self.fpr)


def five_band_from_confusion(conf: np.ndarray) -> FiveBand:
    total = conf.sum()
    tp = conf[2, 2]
    gt_pos = conf[:, 2].sum()
    pred_pos = conf[2, :].sum()
    fp = pred_pos - tp
    gt_neg = total - gt_pos
    return FiveBand(
        _safe_div(np.trace(conf), total),
        _safe_div(tp, gt_pos),
        _safe_div(tp, pred_pos),
        _safe_div(fp, gt_neg),
    )


def five_band_score(attr01, mask) -> FiveBand:
    """Pixel accuracy of the ternary banding, plus recall/precision/FPR with class 2 positive.

    Works on one map or on stacks (pixels pooled).
    """
    return five_band_from_confusion(ternary_confusion(attr01, mask))


# ---------------------------------------------------------------------------
# Binary metrics
# ---------------------------------------------------------------------------


@dataclass
class BinaryScores:
    defined: bool
    auroc: float = float("nan")
    auprc: float = float("nan")
    best_threshold: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    n_pos: int = 0
    n_neg: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic with average ranks (ties get half credit)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes")
    ranks = rankdata(s)
    u = math.fsum(ranks[y]) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _pr_points(scores, labels):
    """(threshold, tp, fp) at each distinct score, thresholds descending; predicted positive iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    fp = np.cumsum(~y[order])
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    return s_sorted[last], tp[last], fp[last]


def auprc(scores, labels) -> float:
    """Step-wise area: sum over distinct thresholds of (R_k - R_{k-1}) * P_k."""
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("AUPRC needs at least one positive")
    _, tp, fp = _pr_points(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.r_[0.0, recall[:-1]]
    return math.fsum((recall - prev) * precision)


def best_f1(scores, labels):
    """(threshold, precision, recall, f1) maximizing F1 over distinct-score thresholds."""
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    thr, tp, fp = _pr_points(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos if n_pos else np.zeros_like(precision)
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    k = int(np.argmax(f1))
    return float(thr[k]), float(precision[k]), float(recall[k]), float(f1[k])


def binary_labels(mask, grouping: str) -> np.ndarray:
    if grouping == "BG_VS_OBJECT":
        return np.asarray(mask) >= 1
    if grouping == "NONFEATURE_VS_FEATURE":
        return np.asarray(mask) == 2
    raise ValidationError(f"grouping must be one of {GROUPINGS}")


def binary_scores(scores, labels) -> BinaryScores:
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return BinaryScores(False, n_pos=n_pos, n_neg=n_neg)
    thr, p, r, f1 = best_f1(scores, y)
    return BinaryScores(True, auroc(scores, y), auprc(scores, y), thr, p, r, f1, n_pos, n_neg)


def binary_metrics(attr01, masks, grouping: str, labels=None) -> dict:
    """Pooled-pixel scores plus the per-sample mean of each metric.

    ``attr01``/``masks`` are one map or ``[N,H,W]`` stacks; when ``labels`` is
    given, samples of the no-object class are dropped first.
    """
    a = np.asarray(attr01, dtype=np.float64)
    m = np.asarray(masks)
    if a.ndim == 2:
        a, m = a[None], m[None]
    if labels is not None:
        keep = np.asarray(labels) != NO_OBJECT
        a, m = a[keep], m[keep]
    y = binary_labels(m, grouping)
    pooled = binary_scores(a, y)
    per = [binary_scores(a[i], y[i]) for i in range(len(a))]
    per = [p for p in per if p.defined]
    mean = {}
    for key in ("auroc", "auprc", "precision", "recall", "f1"):
        vals = [getattr(p, key) for p in per]
        mean[key] = float(np.mean(vals)) if vals else None
    return {"grouping": grouping, "pooled": pooled.to_json(), "per_sample_mean": mean, "n_samples": len(per)}


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------


def entropy(p) -> float:
    """Natural-log Shannon entropy with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if (p < 0).any():
        raise ValidationError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-4:
        raise ValidationError(f"probabilities sum to {p.sum():.6g}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def category_entropy(p, label: int) -> float:
    """Entropy of the distribution restricted to the true class's category, renormalized."""
    idx = category_classes(category_of(label))
    sub = np.asarray(p, dtype=np.float64)[idx]
    total = sub.sum()
    if total <= 0:
        return 0.0
    return entropy(sub / total)


def entropy_protocol_from_probs(probs: list, labels, n_samples: int) -> dict:
    """Entropies over the first ``n_samples`` samples every model gets right (no-object class excluded).

    ``probs`` holds one ``[N,K]`` probability array per model.
    """
    if len(probs) < 2:
        raise ValidationError("entropy protocol compares at least two models")
    labels = np.asarray(labels)
    ok = labels != NO_OBJECT
    for p in probs:
        ok &= p.argmax(axis=1) == labels
    chosen = np.flatnonzero(ok)[:n_samples]
    if chosen.size == 0:
        return {"empty": True, "n_qualifying": 0, "models": [None] * len(probs)}
    models = []
    for p in probs:
        ent = math.fsum(entropy(p[i]) for i in chosen) / chosen.size
        cat = math.fsum(category_entropy(p[i], int(labels[i])) for i in chosen) / chosen.size
        models.append({"entropy_entire": ent, "entropy_category": cat})
    return {"empty": False, "n_qualifying": int(chosen.size), "models": models}


def entropy_protocol(models: list, data, n_samples: int = 1000) -> dict:
    """``models`` is a list of ``(arch, weights)``; outputs are softmax at T = 1."""
    probs = [_softmax64(predict_logits(arch, w, data.images)) for arch, w in models]
    return entropy_protocol_from_probs(probs, data.labels, n_samples)


__all__ = [
    "CATEGORIES",
    "FIVE_BAND_NOTE",
    "five_band_score",
    "ternary_confusion",
    "binary_metrics",
    "auroc",
    "auprc",
    "best_f1",
    "entropy",
    "category_entropy",
    "entropy_protocol",
]
