"""Input attributions: gradient saliency, signed loss gradient, integrated gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError, ValidationError
from .model import ArchSpec, ModelWeights, forward

KINDS = ("SALIENCY", "LOSS_GRAD", "INTEGRATED_GRADIENTS")


@dataclass
class AttributionMap:
    values: np.ndarray  # [H,W]
    kind: str
    target: int
    model_id: str = ""


def _input_grads(arch, weights, images, objective):
    """d objective / d images for a batch, objective built from the logits node."""
    rec = ad.ComputationRecord()
    x = rec.leaf(np.asarray(images, dtype=np.float32))
    params = {k: rec.constant(v) for k, v in weights.params.items()}
    logits, _ = forward(arch, params, x)
    out = objective(logits)
    return ad.backward(rec, out)[x]


def _check_targets(arch, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= arch.num_classes):
        raise ValidationError(f"target class outside 0..{arch.num_classes - 1}")
    return targets


def _single(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected a single image [C,H,W], got {x.shape}")
    return x


def _to_map(grad):
    # single-channel images: drop the channel axis; otherwise reduce by max |.|
    return grad[0] if grad.shape[0] == 1 else np.abs(grad).max(axis=0)


def saliency_batch(arch: ArchSpec, weights: ModelWeights, images, targets, batch_size: int = 100) -> np.ndarray:
    """|d logit_target / d x| for each image, ``[N,H,W]``."""
    targets = _check_targets(arch, targets)
    out = []
    for s in range(0, len(images), batch_size):
        t = targets[s : s + batch_size]
        g = _input_grads(arch, weights, images[s : s + batch_size], lambda z: ad.pick_sum(z, t))
        out.extend(_to_map(np.abs(gi)) for gi in g)
    return np.stack(out)


def saliency(arch: ArchSpec, weights: ModelWeights, x, target_class: int, model_id: str = "") -> AttributionMap:
    x = _single(x)
    values = saliency_batch(arch, weights, x[None], [target_class])[0]
    return AttributionMap(values, "SALIENCY", int(target_class), model_id)


def loss_gradient_batch(arch: ArchSpec, weights: ModelWeights, images, labels, batch_size: int = 100) -> np.ndarray:
    """Signed d CE(softmax(z), onehot(label)) / d x per image, ``[N,H,W]``."""
    labels = _check_targets(arch, labels)
    out = []
    for s in range(0, len(images), batch_size):
        lab = labels[s : s + batch_size]
        target = np.zeros((len(lab), arch.num_classes), dtype=np.float32)
        target[np.arange(len(lab)), lab] = 1.0
        g = _input_grads(
            arch,
            weights,
            images[s : s + batch_size],
            lambda z: ad.cross_entropy_soft(ad.softmax_t(z, 1.0), target, reduction="sum"),
        )
        out.extend(_to_map(gi) for gi in g)
    return np.stack(out)


def loss_gradient(arch: ArchSpec, weights: ModelWeights, x, label: int, model_id: str = "") -> AttributionMap:
    x = _single(x)
    values = loss_gradient_batch(arch, weights, x[None], [label])[0]
    return AttributionMap(values, "LOSS_GRAD", int(label), model_id)


def integrated_gradients(
    arch: ArchSpec,
    weights: ModelWeights,
    x,
    baseline=None,
    steps: int = 128,
    target_class: int = 0,
    model_id: str = "",
    chunk: int = 128,
) -> AttributionMap:
    """(x - baseline) * mean_k grad(baseline + t_k (x - baseline)), t_k = (k + 0.5) / steps."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    x = _single(x)
    baseline = np.zeros_like(x) if baseline is None else _single(baseline)
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline shape {baseline.shape} differs from input {x.shape}")
    _check_targets(arch, [target_class])
    diff = x.astype(np.float64) - baseline.astype(np.float64)
    total = np.zeros(x.shape, dtype=np.float64)
    ts = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    for s in range(0, steps, chunk):
        t = ts[s : s + chunk]
        pts = (baseline[None].astype(np.float64) + t[:, None, None, None] * diff[None]).astype(np.float32)
        idx = np.full(len(t), target_class)
        g = _input_grads(arch, weights, pts, lambda z: ad.pick_sum(z, idx))
        total += g.astype(np.float64).sum(axis=0)
    attr = diff * (total / steps)
    return AttributionMap(_to_map(attr) if attr.shape[0] == 1 else attr.sum(axis=0), "INTEGRATED_GRADIENTS", int(target_class), model_id)


def normalize01(values) -> np.ndarray:
    """Min-max scaling of |values| to [0,1]; constant maps become all zeros."""
    a = np.abs(np.asarray(values, dtype=np.float64))
    if not np.all(np.isfinite(a)):
        raise ValidationError("attribution map has non-finite values")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def normalize01_batch(maps) -> np.ndarray:
    """normalize01 applied to each map of ``[N,H,W]``."""
    a = np.abs(np.asarray(maps, dtype=np.float64))
    lo = a.min(axis=(1, 2), keepdims=True)
    hi = a.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (a - lo) / np.where(span > 0, span, 1.0), 0.0)
