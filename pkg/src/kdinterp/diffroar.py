"""Remove-and-retrain comparison of attribution rankings (DiffROAR).

For each masking fraction the top-ranked (most attributed) and the
bottom-ranked pixels are replaced by the train-split mean image, a fresh model
is trained on each variant, and the score is the accuracy gap
``acc(bottom removed) - acc(top removed)`` in percentage points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attribution import saliency_batch
from .distill import TrainConfig, evaluate, predictions, train
from .errors import KDError, ValidationError
from .model import ArchSpec, ModelWeights
from .rng import Rng64, splitmix64
from .synthgen import Dataset

DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class DiffRoarConfig:
    fractions: tuple = DEFAULT_FRACTIONS
    n_seeds: int = 5
    fill: str = "TRAIN_MEAN_PIXEL"
    retrain: TrainConfig = field(default_factory=TrainConfig)
    target: str = "PREDICTED"  # saliency target: PREDICTED or LABEL

    def __post_init__(self):
        f = list(self.fractions)
        if not f or any(not 0 < x < 1 for x in f) or any(b <= a for a, b in zip(f, f[1:])):
            raise ValidationError("fractions must be strictly increasing inside (0, 1)")
        if self.n_seeds < 1:
            raise ValidationError("n_seeds must be >= 1")
        if self.fill != "TRAIN_MEAN_PIXEL":
            raise ValidationError("only TRAIN_MEAN_PIXEL fill is supported")
        if self.target not in ("PREDICTED", "LABEL"):
            raise ValidationError("target must be PREDICTED or LABEL")


def rank_pixels(attr) -> np.ndarray:
    """Flat pixel indices by descending |attribution|, ties by ascending row-major index."""
    a = np.abs(np.asarray(getattr(attr, "values", attr), dtype=np.float64)).ravel()
    if not np.all(np.isfinite(a)):
        raise ValidationError("attribution map has non-finite values")
    return np.argsort(-a, kind="stable")


def removal_count(fraction: float, n_pixels: int) -> int:
    return int(round(fraction * n_pixels))


def mean_image(data: Dataset) -> np.ndarray:
    return data.images.mean(axis=0, dtype=np.float64).astype(np.float32)


def mask_dataset(data: Dataset, attr_maps, fraction: float, which: str, fill: np.ndarray) -> Dataset:
    """Replace the first (TOP) or last (BOTTOM) round(fraction*H*W) ranked pixels with ``fill``."""
    if len(attr_maps) != len(data):
        raise ValidationError(f"{len(attr_maps)} attribution maps for {len(data)} samples")
    if not 0 < fraction < 1:
        raise ValidationError("fraction must be in (0, 1)")
    if which not in ("TOP", "BOTTOM"):
        raise ValidationError("which must be TOP or BOTTOM")
    n, c, h, w = data.images.shape
    k = removal_count(fraction, h * w)
    images = data.images.reshape(n, c, h * w).copy()
    flat_fill = np.asarray(fill, dtype=np.float32).reshape(c, h * w)
    if k:
        for i in range(n):
            order = rank_pixels(attr_maps[i])
            sel = order[:k] if which == "TOP" else order[h * w - k :]
            images[i][:, sel] = flat_fill[:, sel]
    return data.with_images(images.reshape(n, c, h, w))


def saliency_attributor(target: str = "PREDICTED") -> Callable:
    def attribute(arch, weights, data):
        tgt = predictions(arch, weights, data) if target == "PREDICTED" else data.labels
        return saliency_batch(arch, weights, data.images, tgt)

    return attribute


def random_attributor(seed: int) -> Callable:
    """Image-independent random rankings (one fixed permutation per sample index)."""

    def attribute(arch, weights, data):
        n, _, h, w = data.images.shape
        tag = splitmix64(seed ^ len(data))
        return np.stack([Rng64(tag ^ i).uniform_array(h * w).reshape(h, w) for i in range(n)])

    return attribute


def diffroar(
    base_model: tuple[ArchSpec, ModelWeights],
    train_data: Dataset,
    test_data: Dataset,
    attributor: Callable,
    config: DiffRoarConfig,
    retrain_arch: ArchSpec | None = None,
    progress: Callable | None = None,
) -> dict:
    """Score table: one row per (fraction, seed) plus the aggregate mean."""
    arch, weights = base_model
    retrain_arch = retrain_arch or arch
    train_maps = attributor(arch, weights, train_data)
    test_maps = attributor(arch, weights, test_data)
    fill = mean_image(train_data)
    rows = []
    for frac in config.fractions:
        variants = {
            which: (
                mask_dataset(train_data, train_maps, frac, which, fill),
                mask_dataset(test_data, test_maps, frac, which, fill),
            )
            for which in ("TOP", "BOTTOM")
        }
        for s in range(config.n_seeds):
            cfg = config.retrain.with_(mode="SCRATCH", seed=config.retrain.seed + s)
            accs = {}
            for which, (tr, te) in variants.items():
                try:
                    w = train(retrain_arch, tr, cfg)
                except KDError as exc:
                    raise type(exc)(f"DiffROAR retrain failed at fraction={frac}, seed={s}, {which}: {exc}") from exc
                accs[which] = evaluate(retrain_arch, w, te)
            row = {
                "fraction": frac,
                "seed": s,
                "acc_top_removed": accs["TOP"],
                "acc_bottom_removed": accs["BOTTOM"],
                "diffroar": 100.0 * (accs["BOTTOM"] - accs["TOP"]),
            }
            rows.append(row)
            if progress:
                progress(row)
    return {
        "rows": rows,
        "aggregate": {"diffroar_mean": math.fsum(r["diffroar"] for r in rows) / len(rows), "n": len(rows)},
        "metadata": {
            "sign": "acc(bottom removed) - acc(top removed), percentage points",
            "fill": config.fill,
            "test_split": "masked with the same rule as train",
            "n_seeds": config.n_seeds,
            "fractions": list(config.fractions),
        },
    }
