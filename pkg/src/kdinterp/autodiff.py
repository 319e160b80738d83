"""Dense tensor primitives with reverse-mode differentiation.

Tensors are plain ``numpy.ndarray`` values (float32 by default, NCHW layout).
Calling a primitive on arrays just computes it. Calling it with at least one
:class:`Node` appends an :class:`Entry` to that node's
:class:`ComputationRecord`, and :func:`backward` later walks the record in
reverse to produce gradients for every leaf.

Reductions (means, softmax normalizers, losses) accumulate in float64 and the
scalar losses stay float64; everything else keeps the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, ParameterError, ShapeError, ValidationError

LOG_CLAMP = 1e-12
ROW_SUM_TOL = 1e-4


def as_tensor(value, dtype=np.float32) -> np.ndarray:
    """Coerce to an array of rank <= 4 with all extents >= 1 (scalars allowed)."""
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim > 4:
        raise ShapeError(f"rank {arr.ndim} exceeds 4")
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeError(f"empty extent in shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Record structures
# ---------------------------------------------------------------------------


@dataclass
class Entry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)


class Node:
    """Handle to one value stored in a record."""

    __slots__ = ("record", "id")

    def __init__(self, record: "ComputationRecord", id: int):
        self.record = record
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.record.values[self.id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.record.requires[self.id]

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape})"


class ComputationRecord:
    """Topologically ordered list of primitive applications.

    Single-writer while a forward pass is being recorded, read-only afterwards.
    """

    def __init__(self):
        self.entries: list[Entry] = []
        self.values: list[np.ndarray] = []
        self.requires: list[bool] = []
        self.leaves: list[Node] = []

    def _new(self, value, requires_grad: bool) -> Node:
        self.values.append(value)
        self.requires.append(requires_grad)
        return Node(self, len(self.values) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Node:
        node = self._new(as_tensor(value, getattr(value, "dtype", np.float32)), requires_grad)
        self.leaves.append(node)
        return node

    def constant(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def replay(self, leaf_values: dict | None = None) -> list[np.ndarray]:
        """Recompute every recorded value from the leaves.

        ``leaf_values`` optionally maps leaf nodes to substitute arrays.
        """
        vals: list = [None] * len(self.values)
        for leaf in self.leaves:
            vals[leaf.id] = self.values[leaf.id]
        for node, v in (leaf_values or {}).items():
            vals[node.id] = np.asarray(v, dtype=self.values[node.id].dtype)
        for e in self.entries:
            fwd = _OPS[e.op][0]
            vals[e.output], _ = fwd(*(vals[i] for i in e.inputs), **e.attrs)
        return vals


def backward(record: ComputationRecord, output: Node) -> dict[Node, np.ndarray]:
    """Gradients of the scalar ``output`` with respect to every differentiable leaf."""
    if output.record is not record:
        raise ContractError("output node belongs to a different record")
    out_val = record.values[output.id]
    if out_val.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out_val.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(out_val)}
    values, requires = record.values, record.requires
    for e in reversed(record.entries):
        g = grads.pop(e.output, None)
        if g is None:
            continue
        needs = tuple(requires[i] for i in e.inputs)
        if not any(needs):
            continue
        bwd = _OPS[e.op][1]
        in_grads = bwd(g, tuple(values[i] for i in e.inputs), values[e.output], e.saved, needs, **e.attrs)
        for i, gi, need in zip(e.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    result = {}
    for leaf in record.leaves:
        if requires[leaf.id]:
            v = values[leaf.id]
            g = grads.get(leaf.id)
            result[leaf] = np.zeros_like(v) if g is None else np.asarray(g, dtype=v.dtype).reshape(v.shape)
    return result


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name):
    def deco(pair_factory):
        _OPS[name] = pair_factory()
        return pair_factory

    return deco


def _apply(name: str, *args, **attrs):
    nodes = [a for a in args if isinstance(a, Node)]
    fwd = _OPS[name][0]
    if not nodes:
        out, _ = fwd(*args, **attrs)
        return out
    record = nodes[0].record
    ids = []
    for a in args:
        if isinstance(a, Node):
            if a.record is not record:
                raise ContractError("operands belong to different records")
            ids.append(a.id)
        else:
            ids.append(record.constant(a).id)
    out, saved = fwd(*(record.values[i] for i in ids), **attrs)
    node = record._new(out, any(record.requires[i] for i in ids))
    record.entries.append(Entry(name, tuple(ids), node.id, attrs, saved))
    return node


# ---------------------------------------------------------------------------
# Convolution / pooling / dense
# ---------------------------------------------------------------------------


def _conv_out(extent, k, stride, padding):
    return (extent + 2 * padding - k) // stride + 1


@_register("conv2d")
def _conv2d_pair():
    # Internally channel-major: columns are [C*k*k, N*H'*W'] so both the
    # forward product and the weight gradient are single GEMMs.
    def fwd(x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise ShapeError(f"conv2d expects input[N,C,H,W], kernel[O,C,k,k], bias[O]; got {x.shape}, {w.shape}, {b.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            raise ShapeError(f"conv2d channel axis mismatch: input C={c}, kernel Cin={ci}")
        if kh != kw:
            raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
        if b.shape[0] != o:
            raise ShapeError(f"conv2d bias axis mismatch: bias {b.shape[0]}, kernel Cout={o}")
        if stride < 1 or padding < 0:
            raise ParameterError("conv2d needs stride >= 1 and padding >= 0")
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            raise ShapeError(f"conv2d spatial axes H={h}, W={wd} too small for kernel {kh} with padding {padding}")
        k = kh
        ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
        xt = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=np.result_type(x, w))
        xt[:, :, padding : padding + h, padding : padding + wd] = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, k, k, n, ho, wo), dtype=xt.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(c * k * k, n * ho * wo)
        out = w.reshape(o, -1).astype(xt.dtype, copy=False) @ cols
        out += b[:, None]
        out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
        return out, {"cols": cols}

    def bwd(g, inputs, out, saved, needs, stride=1, padding=0):
        x, w, b = inputs
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho, wo = g.shape[2], g.shape[3]
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = gb = None
        if needs[1]:
            gw = (gt @ saved["cols"].T).reshape(w.shape).astype(w.dtype, copy=False)
        if needs[2]:
            gb = gt.sum(axis=1, dtype=np.float64).astype(b.dtype)
        if needs[0]:
            dcols = (w.reshape(o, -1).T.astype(gt.dtype, copy=False) @ gt).reshape(c, k, k, n, ho, wo)
            gxt = np.zeros((c, n, h + 2 * padding, wd + 2 * padding), dtype=gt.dtype)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = gxt[:, :, padding : padding + h, padding : padding + wd].transpose(1, 0, 2, 3).astype(x.dtype)
        return gx, gw, gb

    return fwd, bwd


@_register("relu")
def _relu_pair():
    def fwd(x):
        return np.maximum(x, 0).astype(x.dtype, copy=False), {}

    def bwd(g, inputs, out, saved, needs):
        return (g * (inputs[0] > 0),)

    return fwd, bwd


@_register("maxpool2x2")
def _maxpool_pair():
    def fwd(x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2x2 expects [N,C,H,W], got {x.shape}")
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial axes, got H={h}, W={w}")
        quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        return out, {}

    def bwd(g, inputs, out, saved, needs):
        x = inputs[0]
        gx = np.zeros_like(x, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        # first maximum in row-major window order receives the gradient
        for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
            hit = (x[:, :, di::2, dj::2] == out) & ~taken
            gx[:, :, di::2, dj::2] = g * hit
            taken |= hit
        return (gx,)

    return fwd, bwd


@_register("global_avg_pool")
def _gap_pair():
    def fwd(x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype), {}

    def bwd(g, inputs, out, saved, needs):
        x = inputs[0]
        hw = x.shape[2] * x.shape[3]
        gx = np.broadcast_to((g / hw)[:, :, None, None], x.shape).astype(x.dtype)
        return (gx,)

    return fwd, bwd


@_register("flatten")
def _flatten_pair():
    def fwd(x):
        return x.reshape(x.shape[0], -1), {}

    def bwd(g, inputs, out, saved, needs):
        return (g.reshape(inputs[0].shape),)

    return fwd, bwd


@_register("linear")
def _linear_pair():
    def fwd(x, w, b):
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
            raise ShapeError(f"linear expects x[N,Din], weight[Dout,Din], bias[Dout]; got {x.shape}, {w.shape}, {b.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear Din axis mismatch: input {x.shape[1]}, weight {w.shape[1]}")
        if b.shape[0] != w.shape[0]:
            raise ShapeError(f"linear Dout axis mismatch: bias {b.shape[0]}, weight {w.shape[0]}")
        return x @ w.T + b, {}

    def bwd(g, inputs, out, saved, needs):
        x, w, b = inputs
        gx = g @ w if needs[0] else None
        gw = g.T @ x if needs[1] else None
        gb = g.sum(axis=0, dtype=np.float64).astype(b.dtype) if needs[2] else None
        return gx, gw, gb

    return fwd, bwd


# ---------------------------------------------------------------------------
# Probabilities and losses
# ---------------------------------------------------------------------------


@_register("softmax_t")
def _softmax_pair():
    def fwd(z, T=1.0):
        if not T > 0:
            raise ParameterError(f"temperature must be > 0, got {T}")
        if z.ndim != 2 or z.shape[1] < 2:
            raise ShapeError(f"softmax_t expects logits[N,K] with K >= 2, got {z.shape}")
        s = z.astype(np.float64) / T
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        p = e / e.sum(axis=1, keepdims=True)
        return p.astype(z.dtype), {}

    def bwd(g, inputs, out, saved, needs, T=1.0):
        p = out.astype(np.float64)
        g64 = g.astype(np.float64)
        gz = p * (g64 - (g64 * p).sum(axis=1, keepdims=True)) / T
        return (gz.astype(inputs[0].dtype),)

    return fwd, bwd


def _check_rows(name, arr):
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be [N,K], got {arr.shape}")
    sums = arr.sum(axis=1, dtype=np.float64)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size:
        raise ValidationError(f"{name} row {bad[0]} sums to {sums[bad[0]]:.6g}, not 1")
    if (arr < 0).any():
        raise ValidationError(f"{name} has negative entries")


@_register("cross_entropy_soft")
def _ce_pair():
    def fwd(pred, target, reduction="mean"):
        if pred.shape != target.shape:
            raise ShapeError(f"cross_entropy_soft shapes differ: {pred.shape} vs {target.shape}")
        _check_rows("pred", pred)
        _check_rows("target", target)
        logp = np.log(np.maximum(pred.astype(np.float64), LOG_CLAMP))
        per_row = -(target.astype(np.float64) * logp).sum(axis=1)
        total = per_row.mean() if reduction == "mean" else per_row.sum()
        return np.asarray(total, dtype=np.float64), {"logp": logp}

    def bwd(g, inputs, out, saved, needs, reduction="mean"):
        pred, target = inputs
        scale = float(g) / (pred.shape[0] if reduction == "mean" else 1)
        gp = gt = None
        if needs[0]:
            p64 = pred.astype(np.float64)
            live = p64 >= LOG_CLAMP
            gp = np.where(live, -target.astype(np.float64) / np.where(live, p64, 1.0), 0.0) * scale
            gp = gp.astype(pred.dtype)
        if needs[1]:
            gt = (-saved["logp"] * scale).astype(target.dtype)
        return gp, gt

    return fwd, bwd


@_register("attention_map")
def _attention_pair():
    def fwd(a):
        if a.ndim != 4:
            raise ShapeError(f"attention_map expects [N,C,H,W], got {a.shape}")
        s = (a.astype(np.float64) ** 2).sum(axis=1).reshape(a.shape[0], -1)
        norm = np.sqrt((s * s).sum(axis=1, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        q = np.where(norm > 0, s / safe, 0.0)
        return q.astype(a.dtype), {"norm": safe, "live": norm > 0}

    def bwd(g, inputs, out, saved, needs):
        a = inputs[0]
        q = out.astype(np.float64)
        g64 = g.astype(np.float64)
        ds = (g64 - q * (q * g64).sum(axis=1, keepdims=True)) / saved["norm"]
        ds = np.where(saved["live"], ds, 0.0)
        n, c, h, w = a.shape
        ga = 2.0 * a.astype(np.float64) * ds.reshape(n, 1, h, w)
        return (ga.astype(a.dtype),)

    return fwd, bwd


@_register("sq_dist_mean")
def _sqdist_pair():
    def fwd(a, b):
        if a.shape != b.shape:
            raise ShapeError(f"sq_dist_mean shapes differ: {a.shape} vs {b.shape}")
        d = a.astype(np.float64) - b.astype(np.float64)
        return np.asarray((d * d).reshape(d.shape[0], -1).sum(axis=1).mean()), {}

    def bwd(g, inputs, out, saved, needs):
        a, b = inputs
        d = (a.astype(np.float64) - b.astype(np.float64)) * (2.0 * float(g) / a.shape[0])
        return (d.astype(a.dtype) if needs[0] else None, (-d).astype(b.dtype) if needs[1] else None)

    return fwd, bwd


@_register("pick_sum")
def _pick_pair():
    def fwd(z, idx):
        rows = np.arange(z.shape[0])
        return np.asarray(z[rows, idx.astype(np.int64)].sum(dtype=np.float64)), {}

    def bwd(g, inputs, out, saved, needs):
        z, idx = inputs
        gz = np.zeros_like(z)
        gz[np.arange(z.shape[0]), idx.astype(np.int64)] = float(g)
        return gz, None

    return fwd, bwd


@_register("add")
def _add_pair():
    def fwd(*xs):
        out = xs[0].astype(np.result_type(*xs))
        for x in xs[1:]:
            out = out + x
        return out, {}

    def bwd(g, inputs, out, saved, needs):
        return tuple(np.asarray(g, dtype=x.dtype).reshape(x.shape) for x in inputs)

    return fwd, bwd


@_register("scale")
def _scale_pair():
    def fwd(x, c=1.0):
        return (x * c).astype(x.dtype), {}

    def bwd(g, inputs, out, saved, needs, c=1.0):
        return ((g * c).astype(inputs[0].dtype),)

    return fwd, bwd


# ---------------------------------------------------------------------------
# Public functional surface
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0):
    return _apply("conv2d", x, kernel, bias, stride=int(stride), padding=int(padding))


def relu(x):
    return _apply("relu", x)


def maxpool2x2(x):
    return _apply("maxpool2x2", x)


def global_avg_pool(x):
    return _apply("global_avg_pool", x)


def flatten(x):
    return _apply("flatten", x)


def linear(x, weight, bias):
    return _apply("linear", x, weight, bias)


def softmax_t(logits, T: float = 1.0):
    if not T > 0:
        raise ParameterError(f"temperature must be > 0, got {T}")
    return _apply("softmax_t", logits, T=float(T))


def cross_entropy_soft(pred, target, reduction: str = "mean"):
    """Mean (or sum) over rows of ``-sum_k target_k * log(max(pred_k, 1e-12))``."""
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    return _apply("cross_entropy_soft", pred, target, reduction=reduction)


def attention_map(act):
    """Channel-summed squared activations, flattened and L2-normalized per sample."""
    return _apply("attention_map", act)


def sq_dist_mean(a, b):
    """Mean over samples of the squared L2 distance between rows."""
    return _apply("sq_dist_mean", a, b)


def pick_sum(logits, index):
    """``sum_n logits[n, index[n]]``."""
    return _apply("pick_sum", logits, np.asarray(index))


def add(*xs):
    return _apply("add", *xs)


def scale(x, c: float):
    return _apply("scale", x, c=float(c))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x
