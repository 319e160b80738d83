"""Distillation and label-smoothing losses, the optimizer, and training runs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ParameterError, ShapeError, ValidationError
from .model import ArchSpec, ModelWeights, check_weights, forward, init_weights, predict_logits
from .rng import Rng64
from .synthgen import Dataset

MODES = ("SCRATCH", "KD", "LS", "SELF_KD", "KD_PLUS_AT")
TEACHER_MODES = ("KD", "SELF_KD", "KD_PLUS_AT")

# Attention-transfer factor 1000 applied to a per-element mean over a 16x16 map
# equals 1000/256 on the per-sample squared distance used by loss_at.
DEFAULT_AT_WEIGHT = 1000.0 / 256.0


def one_hot(labels, k: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")


def loss_kd(z_s, z_t, labels, alpha: float, T: float):
    """(1-a) CE(softmax(z_s), y) + a T^2 CE(softmax(z_s/T), softmax(z_t/T)), batch means."""
    _check_alpha(alpha)
    if not T > 0:
        raise ParameterError(f"temperature must be > 0, got {T}")
    zs_shape, zt_shape = ad.value_of(z_s).shape, ad.value_of(z_t).shape
    if zs_shape != zt_shape:
        raise ShapeError(f"student logits {zs_shape} and teacher logits {zt_shape} differ")
    k = zs_shape[1]
    hard = ad.cross_entropy_soft(ad.softmax_t(z_s, 1.0), one_hot(labels, k))
    soft = ad.cross_entropy_soft(ad.softmax_t(z_s, T), ad.softmax_t(z_t, T))
    return ad.add(ad.scale(hard, 1.0 - alpha), ad.scale(soft, alpha * T * T))


def loss_ls(z, labels, alpha: float):
    """(1-a) CE(softmax(z), y) + a CE(softmax(z), uniform)."""
    _check_alpha(alpha)
    k = ad.value_of(z).shape[1]
    p = ad.softmax_t(z, 1.0)
    uniform = np.full((ad.value_of(z).shape[0], k), 1.0 / k, dtype=np.float32)
    hard = ad.cross_entropy_soft(p, one_hot(labels, k))
    smooth = ad.cross_entropy_soft(p, uniform)
    return ad.add(ad.scale(hard, 1.0 - alpha), ad.scale(smooth, alpha))


def loss_at(student_acts, teacher_acts, weight: float):
    """weight * mean over tap pairs of mean_n ||Q_s - Q_t||^2 with Q the normalized attention map.

    Teacher entries may be activations [N,C,H,W] or precomputed attention maps [N,H*W].
    """
    if len(student_acts) != len(teacher_acts) or not student_acts:
        raise ContractError("loss_at needs equally many (>= 1) student and teacher taps")
    if weight < 0:
        raise ParameterError("at weight must be >= 0")
    terms = []
    for s, t in zip(student_acts, teacher_acts):
        s_shape = ad.value_of(s).shape
        t_val = ad.value_of(t)
        t_spatial = t_val.shape[2:] if t_val.ndim == 4 else None
        if t_spatial is not None and t_spatial != s_shape[2:]:
            raise ShapeError(f"attention spatial axes differ: student {s_shape[2:]}, teacher {t_spatial}")
        if t_spatial is None and t_val.shape[1] != s_shape[2] * s_shape[3]:
            raise ShapeError(f"teacher attention map length {t_val.shape[1]} does not match student {s_shape[2:]}")
        qt = ad.attention_map(t) if t_val.ndim == 4 else t
        terms.append(ad.sq_dist_mean(ad.attention_map(s), qt))
    return ad.scale(ad.add(*terms), weight / len(terms))


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update += self.wd * p
            p -= (self.lr * update).astype(p.dtype)


class SGD:
    """SGD with momentum 0.9 and decoupled weight decay."""

    def __init__(self, params: dict, lr=1e-3, weight_decay=0.0, momentum=0.9):
        self.lr, self.wd, self.mu = lr, weight_decay, momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        for k, p in params.items():
            b = self.buf[k]
            b *= self.mu
            b += grads[k]
            update = b + self.wd * p if self.wd else b
            p -= (self.lr * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    optimizer: str = "ADAM"
    alpha: float = 0.5
    temperature: float = 4.0
    mode: str = "SCRATCH"
    at_weight: float = DEFAULT_AT_WEIGHT
    seed: int = 0
    at_tap: str = "layer3"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not self.temperature > 0:
            raise ParameterError("temperature must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.optimizer not in ("ADAM", "SGD"):
            raise ValidationError(f"optimizer must be ADAM or SGD, got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.at_weight < 0:
            raise ParameterError("at_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng64(seed ^ epoch).permutation(n)


def teacher_targets(teacher, data: Dataset, config: TrainConfig, batch_size: int = 200):
    """Frozen-teacher logits (and attention maps for KD_PLUS_AT) for every sample, computed once."""
    t_arch, t_weights = teacher
    logits, att = [], []
    want_at = config.mode == "KD_PLUS_AT"
    for s in range(0, len(data), batch_size):
        z, acts = forward(t_arch, t_weights.params, data.images[s : s + batch_size], taps=(config.at_tap,) if want_at else ())
        logits.append(z)
        if want_at:
            att.append(ad.attention_map(acts[config.at_tap]))
    return np.concatenate(logits), (np.concatenate(att) if want_at else None)


def batch_loss(config: TrainConfig, z, labels, acts=None, t_logits=None, t_att=None):
    mode = config.mode
    if mode == "SCRATCH":
        return ad.cross_entropy_soft(ad.softmax_t(z, 1.0), one_hot(labels, ad.value_of(z).shape[1]))
    if mode == "LS":
        return loss_ls(z, labels, config.alpha)
    kd = loss_kd(z, t_logits, labels, config.alpha, config.temperature)
    if mode == "KD_PLUS_AT":
        return ad.add(kd, loss_at([acts[config.at_tap]], [t_att], config.at_weight))
    return kd


def train(arch: ArchSpec, data: Dataset, config: TrainConfig, teacher=None, init: ModelWeights | None = None) -> ModelWeights:
    """Train from a Kaiming-uniform init seeded by ``config.seed``.

    ``teacher`` is ``(arch, weights)`` and is required for KD, SELF_KD and
    KD_PLUS_AT. Deterministic in ``(config, data, teacher)``.
    """
    if config.mode in TEACHER_MODES:
        if teacher is None:
            raise ContractError(f"mode {config.mode} requires a teacher")
        t_arch, t_weights = teacher
        check_weights(t_arch, t_weights)
        if config.mode == "SELF_KD" and t_arch.to_dict() != arch.to_dict():
            raise ContractError("SELF_KD requires the teacher architecture to equal the student's")
        if t_arch.num_classes != arch.num_classes:
            raise ContractError("teacher and student disagree on the number of classes")
    n = len(data)
    if n == 0:
        raise ValidationError("empty training set")
    weights = init.copy() if init is not None else init_weights(arch, config.seed)
    params = weights.params
    opt_cls = Adam if config.optimizer == "ADAM" else SGD
    opt = opt_cls(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    t_logits = t_att = None
    if config.mode in TEACHER_MODES:
        t_logits, t_att = teacher_targets(teacher, data, config)
    taps = (config.at_tap,) if config.mode == "KD_PLUS_AT" else ()
    history = list(weights.history)
    for epoch in range(1, config.epochs + 1):
        perm = epoch_permutation(config.seed, epoch, n)
        loss_sum, correct = 0.0, 0
        batches = 0
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            labels = data.labels[idx]
            rec = ad.ComputationRecord()
            nodes = {k: rec.leaf(v) for k, v in params.items()}
            z, acts = forward(arch, nodes, rec.constant(data.images[idx]), taps=taps)
            loss = batch_loss(
                config,
                z,
                labels,
                acts,
                None if t_logits is None else t_logits[idx],
                None if t_att is None else t_att[idx],
            )
            grads = ad.backward(rec, loss)
            opt.step(params, {k: grads[nodes[k]] for k in params})
            loss_sum += float(loss.value)
            correct += int(np.count_nonzero(z.value.argmax(axis=1) == labels))
            batches += 1
        history.append((float(np.float32(loss_sum / batches)), float(np.float32(correct / n))))
    return ModelWeights(params, history)


def predictions(arch: ArchSpec, weights: ModelWeights, data: Dataset) -> np.ndarray:
    """Argmax class per sample; ties go to the lower class id."""
    return predict_logits(arch, weights, data.images).argmax(axis=1)


def evaluate(arch: ArchSpec, weights: ModelWeights, data: Dataset) -> float:
    if len(data) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    return float(np.mean(predictions(arch, weights, data) == data.labels))
