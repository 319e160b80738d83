"""Network dissection: align individual conv units with annotated concepts.

For each unit the activation values of every spatial position of every sample
are pooled to pick a top-quantile threshold. Each map is upsampled to mask
resolution, binarized at that threshold and compared to every concept mask
with a dataset-level IoU (summed intersections over summed unions).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError, ValidationError
from .model import ArchSpec, ModelWeights, forward
from .synthgen import CLASS_CATALOG, Dataset

CONCEPTS = (
    "OBJECT_ANY",
    "OBJECT_CIRCULAR",
    "OBJECT_RECTANGULAR",
    "OBJECT_TAIL",
    *(f"FEATURE_{k}" for k in range(9)),
)


def concept_group(name: str) -> str:
    return name.split("_", 1)[0]


def worker_count() -> int:
    hint = os.environ.get("KD_DISSECT_THREADS")
    if hint:
        try:
            return max(1, int(hint))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class ConceptMaskSet:
    """Binary concept masks, stored sparsely: for concept ``c`` only the
    samples in ``support[c]`` carry a non-empty mask (``masks[c][j]`` belongs
    to sample ``support[c][j]``)."""

    names: tuple
    n_samples: int
    shape: tuple
    support: list  # per concept: int array of sample indices
    masks: list  # per concept: bool array [len(support), H, W]

    def mask(self, concept: int, sample: int) -> np.ndarray:
        where = np.flatnonzero(self.support[concept] == sample)
        if where.size:
            return self.masks[concept][where[0]]
        return np.zeros(self.shape, dtype=bool)

    def pixel_count(self, concept: int) -> int:
        if not hasattr(self, "_counts"):
            self._counts = [int(np.count_nonzero(m)) for m in self.masks]
        return self._counts[concept]

    @classmethod
    def from_ternary(cls, masks: np.ndarray, labels: np.ndarray) -> "ConceptMaskSet":
        """Concepts from ternary ground truth.

        OBJECT_ANY = mask >= 1; OBJECT_<category> = that, restricted to samples of
        the category; FEATURE_k = (mask == 2) on samples of class k.
        """
        if masks.ndim != 3 or len(masks) != len(labels):
            raise ShapeError(f"expected masks [N,H,W] aligned with labels, got {masks.shape} and {len(labels)} labels")
        labels = np.asarray(labels)
        obj = masks >= 1
        feat = masks == 2
        nonempty = obj.reshape(len(obj), -1).any(axis=1)
        support, per = [], []

        def add(idx, source):
            idx = idx[nonempty[idx]]
            support.append(idx)
            per.append(source[idx])

        add(np.arange(len(labels)), obj)
        for cat in ("CIRCULAR", "RECTANGULAR", "TAIL"):
            classes = [c for c, v in CLASS_CATALOG.items() if v[0] == cat]
            add(np.flatnonzero(np.isin(labels, classes)), obj)
        for k in range(9):
            add(np.flatnonzero(labels == k), feat)
        return cls(CONCEPTS, len(labels), masks.shape[1:], support, per)

    @classmethod
    def from_dataset(cls, data: Dataset) -> "ConceptMaskSet":
        if data.masks is None:
            raise ValidationError("dataset has no ground-truth masks")
        return cls.from_ternary(data.masks, data.labels)


@dataclass(frozen=True)
class DissectionConfig:
    tap: str = "layer3"
    quantile: float = 0.005
    iou_threshold: float = 0.05

    def __post_init__(self):
        if not 0 < self.quantile < 1:
            raise ValidationError("quantile must be in (0, 1)")
        if not 0 < self.iou_threshold < 1:
            raise ValidationError("iou_threshold must be in (0, 1)")


@dataclass
class UnitRecord:
    unit: int
    threshold: float
    best_concept: str
    best_iou: float
    detected: list


@dataclass
class DissectionReport:
    config: DissectionConfig
    units: list
    group_counts: dict
    unique: int
    total: int
    concepts: tuple = CONCEPTS
    iou_table: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "config": {
                "tap": self.config.tap,
                "quantile": self.config.quantile,
                "iou_threshold": self.config.iou_threshold,
            },
            "metadata": {
                "iou": "dataset-level (sum of intersections / sum of unions)",
                "threshold": "exact order statistic of pooled unit activations",
                "upsampling": "bilinear, corner-aligned",
                "count_rule": "each detecting unit counted once, in the group of its best concept",
            },
            "units": [
                {
                    "unit": u.unit,
                    "threshold": u.threshold,
                    "best_concept": u.best_concept,
                    "best_iou": u.best_iou,
                    "detected": list(u.detected),
                }
                for u in self.units
            ],
            "counts": {"groups": dict(self.group_counts), "unique": self.unique, "total": self.total},
        }


# ---------------------------------------------------------------------------
# Primitive steps
# ---------------------------------------------------------------------------


def collect_activations(arch: ArchSpec, weights: ModelWeights, data: Dataset, tap: str, batch_size: int = 200) -> np.ndarray:
    """Activation maps at ``tap`` as ``[units, N, h, w]`` in dataset order."""
    shape = arch.tap_shape(tap)
    if len(shape) != 3:
        raise ContractError(f"tap {tap!r} is not a spatial map")
    out = np.empty((shape[0], len(data), shape[1], shape[2]), dtype=np.float32)
    for s in range(0, len(data), batch_size):
        _, acts = forward(arch, weights.params, data.images[s : s + batch_size], taps=(tap,))
        out[:, s : s + batch_size] = acts[tap].transpose(1, 0, 2, 3)
    return out


def unit_threshold(values, q: float):
    """Value at sorted index floor((1 - q) * N): at least a q fraction of values is >= it."""
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValidationError("no activation values")
    if not 0 < q < 1:
        raise ValidationError("q must be in (0, 1)")
    k = min(int(math.floor((1.0 - q) * v.size)), v.size - 1)
    return np.partition(v, k)[k]


def _axis_weights(d: int, n: int):
    if n > 1:
        src = np.arange(n, dtype=np.float64) * ((d - 1) / (n - 1))
    else:
        src = np.zeros(1)
    i0 = np.minimum(np.floor(src).astype(np.int64), d - 1)
    i1 = np.minimum(i0 + 1, d - 1)
    f = src - i0
    return i0, i1, f


def upsample_bilinear(maps, H: int, W: int) -> np.ndarray:
    """Corner-aligned bilinear resize of ``[..., h, w]`` maps to ``[..., H, W]`` (float64).

    Separable: rows are blended first, then columns, i.e. for each output pixel
    ``(1-fx) * ((1-fy) a00 + fy a10) + fx * ((1-fy) a01 + fy a11)``.
    """
    a = np.asarray(maps, dtype=np.float64)
    if a.ndim < 2 or min(a.shape[-2:]) < 1:
        raise ShapeError(f"expected at least a 2-D map, got shape {a.shape}")
    y0, y1, fy = _axis_weights(a.shape[-2], H)
    x0, x1, fx = _axis_weights(a.shape[-1], W)
    rows = (1.0 - fy)[:, None] * a[..., y0, :] + fy[:, None] * a[..., y1, :]
    return (1.0 - fx) * rows[..., :, x0] + fx * rows[..., :, x1]


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou shape mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(a & b)) / union


# ---------------------------------------------------------------------------
# Dissection
# ---------------------------------------------------------------------------


def _unit_ious(unit_maps: np.ndarray, concepts: ConceptMaskSet, q: float):
    """Threshold and per-concept dataset-level IoU for one unit's stack of maps."""
    H, W = concepts.shape
    thr = unit_threshold(unit_maps, q)
    # An interpolated value never exceeds its largest corner, so samples whose
    # map stays below the threshold binarize to all zeros and can be skipped.
    active = np.flatnonzero(unit_maps.reshape(len(unit_maps), -1).max(axis=1) >= thr)
    binar = upsample_bilinear(unit_maps[active], H, W) >= float(thr)
    act_total = int(np.count_nonzero(binar))
    row = np.zeros(len(concepts.names))
    for c in range(len(concepts.names)):
        _, in_active, in_support = np.intersect1d(active, concepts.support[c], assume_unique=True, return_indices=True)
        inter = int(np.count_nonzero(binar[in_active] & concepts.masks[c][in_support])) if in_active.size else 0
        union = act_total + concepts.pixel_count(c) - inter
        row[c] = inter / union if union else 0.0
    return thr, row


def iou_table(acts: np.ndarray, concepts: ConceptMaskSet, q: float, workers: int | None = None):
    """``(thresholds[U], ious[U, C])`` for stacked activations ``[U, N, h, w]``."""
    if acts.shape[1] != concepts.n_samples:
        raise ContractError(f"activations cover {acts.shape[1]} samples, concepts cover {concepts.n_samples}")
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda u: _unit_ious(acts[u], concepts, q), range(len(acts))))
    else:
        results = [_unit_ious(acts[u], concepts, q) for u in range(len(acts))]
    thresholds = np.array([r[0] for r in results], dtype=acts.dtype)
    table = np.stack([r[1] for r in results]) if results else np.zeros((0, len(concepts.names)))
    return thresholds, table


def summarize(thresholds, table, names, config: DissectionConfig) -> DissectionReport:
    units = []
    groups = {g: 0 for g in dict.fromkeys(concept_group(n) for n in names)}
    unique = total = 0
    for u, row in enumerate(table):
        best = int(np.argmax(row))  # first maximum -> lower concept id on ties
        detected = [names[c] for c in range(len(names)) if row[c] >= config.iou_threshold]
        units.append(UnitRecord(u, float(thresholds[u]), names[best], float(row[best]), detected))
        if detected:
            total += 1
            groups[concept_group(names[best])] += 1
            if len(detected) == 1:
                unique += 1
    return DissectionReport(config, units, groups, unique, total, tuple(names), table)


def dissect_activations(acts: np.ndarray, concepts: ConceptMaskSet, config: DissectionConfig) -> DissectionReport:
    thresholds, table = iou_table(acts, concepts, config.quantile)
    return summarize(thresholds, table, concepts.names, config)


def dissect(arch: ArchSpec, weights: ModelWeights, data: Dataset, concepts: ConceptMaskSet, config: DissectionConfig) -> DissectionReport:
    if concepts.n_samples != len(data):
        raise ContractError(f"concept masks cover {concepts.n_samples} samples but dataset has {len(data)}")
    acts = collect_activations(arch, weights, data, config.tap)
    return dissect_activations(acts, concepts, config)


DEFAULT_QUANTILES = tuple(round(0.001 * i, 3) for i in range(1, 11))
DEFAULT_IOU_THRESHOLDS = tuple(round(0.01 * i, 2) for i in range(1, 6))


def sweep_activations(acts, concepts, q_list=DEFAULT_QUANTILES, thr_list=DEFAULT_IOU_THRESHOLDS, tap="layer3") -> list[dict]:
    if not len(q_list) or not len(thr_list):
        raise ValidationError("sweep needs non-empty quantile and threshold lists")
    rows = []
    for q in q_list:
        thresholds, table = iou_table(acts, concepts, q)
        for thr in thr_list:
            rep = summarize(thresholds, table, concepts.names, DissectionConfig(tap, q, thr))
            rows.append({"quantile": q, "iou_threshold": thr, "unique": rep.unique, "total": rep.total})
    return rows


def sweep(arch, weights, data, concepts, q_list=DEFAULT_QUANTILES, thr_list=DEFAULT_IOU_THRESHOLDS, tap="layer3") -> list[dict]:
    """One dissection per (quantile, IoU threshold); activations are collected once."""
    if concepts.n_samples != len(data):
        raise ContractError(f"concept masks cover {concepts.n_samples} samples but dataset has {len(data)}")
    acts = collect_activations(arch, weights, data, tap)
    return sweep_activations(acts, concepts, q_list, thr_list, tap)


__all__ = [
    "CONCEPTS",
    "ConceptMaskSet",
    "DissectionConfig",
    "DissectionReport",
    "collect_activations",
    "unit_threshold",
    "upsample_bilinear",
    "iou",
    "dissect",
    "dissect_activations",
    "sweep",
]
