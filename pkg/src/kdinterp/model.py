"""Layer-list network descriptions, parameter stores and the KDM1 model file."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, FormatError, ShapeError
from .rng import Rng64, kaiming_uniform_init

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "flatten", "linear")
PARAM_KINDS = ("conv", "linear")


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name}
        if self.kind == "conv":
            d.update(in_ch=self.in_ch, out_ch=self.out_ch, kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind == "linear":
            d.update(in_ch=self.in_ch, out_ch=self.out_ch)
        return d

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind == "conv":
            return [
                (f"{self.name}.weight", (self.out_ch, self.in_ch, self.kernel, self.kernel)),
                (f"{self.name}.bias", (self.out_ch,)),
            ]
        if self.kind == "linear":
            return [(f"{self.name}.weight", (self.out_ch, self.in_ch)), (f"{self.name}.bias", (self.out_ch,))]
        return []

    def fan_in(self) -> int:
        return self.in_ch * self.kernel * self.kernel if self.kind == "conv" else self.in_ch


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layers plus named taps.

    A tap ``name -> i`` exposes the output of ``layers[i]``.
    """

    layers: tuple[Layer, ...]
    taps: dict = field(default_factory=dict)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 64, 64)

    def __post_init__(self):
        self.validate()

    def validate(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ContractError("layer names must be unique")
        for l in self.layers:
            if l.kind not in LAYER_KINDS:
                raise ContractError(f"unknown layer kind {l.kind!r}")
        shapes = self.layer_output_shapes()
        last = self.layers[-1]
        if last.kind != "linear" or last.out_ch != self.num_classes:
            raise ContractError(f"network must end in linear({self.num_classes}) layer")
        for tap, i in self.taps.items():
            if not 0 <= i < len(self.layers):
                raise ContractError(f"tap {tap!r} points outside the layer list")
        if not any(len(shapes[i]) == 3 for i in self.taps.values()):
            raise ContractError("at least one tap must expose a spatial (convolutional) map")

    def layer_output_shapes(self) -> list[tuple[int, ...]]:
        shape: tuple[int, ...] = tuple(self.input_shape)
        out = []
        for l in self.layers:
            if l.kind == "conv":
                if len(shape) != 3 or shape[0] != l.in_ch:
                    raise ShapeError(f"layer {l.name}: expected [{l.in_ch},H,W] input, got {shape}")
                c, h, w = shape
                ho = (h + 2 * l.padding - l.kernel) // l.stride + 1
                wo = (w + 2 * l.padding - l.kernel) // l.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {l.name}: spatial extent vanishes")
                shape = (l.out_ch, ho, wo)
            elif l.kind == "maxpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ShapeError(f"layer {l.name}: maxpool needs even H, W, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif l.kind == "gap":
                if len(shape) != 3:
                    raise ShapeError(f"layer {l.name}: gap needs a spatial input")
                shape = (shape[0],)
            elif l.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif l.kind == "linear":
                if len(shape) != 1 or shape[0] != l.in_ch:
                    raise ShapeError(f"layer {l.name}: expected [{l.in_ch}] input, got {shape}")
                shape = (l.out_ch,)
            out.append(shape)
        return out

    def tap_shape(self, tap: str) -> tuple[int, ...]:
        if tap not in self.taps:
            raise ContractError(f"unknown tap {tap!r}; available: {sorted(self.taps)}")
        return self.layer_output_shapes()[self.taps[tap]]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [ps for l in self.layers for ps in l.param_shapes()]

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "taps": dict(sorted(self.taps.items())),
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            layers=tuple(Layer(**l) for l in d["layers"]),
            taps={k: int(v) for k, v in d["taps"].items()},
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


def conv_net(widths=(8, 16, 32), num_classes: int = 10, image_size: int = 64, in_ch: int = 1) -> ArchSpec:
    """Three conv stages (pool after the first two), global average pool, linear head.

    The ReLU output of the third stage is tapped as ``layer3``.
    """
    layers = []
    prev = in_ch
    for i, w in enumerate(widths, start=1):
        layers.append(Layer("conv", f"conv{i}", prev, w, 3, 1, 1))
        layers.append(Layer("relu", f"relu{i}"))
        if i < len(widths):
            layers.append(Layer("maxpool", f"pool{i}"))
        prev = w
    layers += [Layer("gap", "gap"), Layer("linear", "fc", prev, num_classes)]
    taps = {f"layer{i}": 1 + 3 * (i - 1) for i in range(1, len(widths) + 1)}
    return ArchSpec(tuple(layers), taps, num_classes, (in_ch, image_size, image_size))


def student_arch(image_size: int = 64) -> ArchSpec:
    return conv_net((8, 16, 32), image_size=image_size)


def teacher_arch(image_size: int = 64) -> ArchSpec:
    return conv_net((16, 32, 64), image_size=image_size)


@dataclass
class ModelWeights:
    params: dict  # name -> float32 array, in declaration order
    history: list = field(default_factory=list)  # [(mean_loss, train_accuracy)] per epoch

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.params.items()}, [tuple(h) for h in self.history])


def init_weights(arch: ArchSpec, seed: int) -> ModelWeights:
    """Kaiming-uniform weights drawn in declaration order; zero biases."""
    rng = Rng64(seed)
    params = {}
    for l in arch.layers:
        for name, shape in l.param_shapes():
            if name.endswith(".weight"):
                params[name] = kaiming_uniform_init(rng, l.fan_in(), shape)
            else:
                params[name] = np.zeros(shape, dtype=np.float32)
    return ModelWeights(params)


def check_weights(arch: ArchSpec, weights: ModelWeights):
    expected = arch.param_shapes()
    if [n for n, _ in expected] != list(weights.params):
        raise ContractError("parameter names do not match the architecture")
    for name, shape in expected:
        if weights.params[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {weights.params[name].shape}")


def forward(arch: ArchSpec, params: dict, x, taps=()):
    """Run the network. ``params`` values and ``x`` may be arrays or record nodes.

    Returns ``(logits, {tap: activation})``.
    """
    want = {arch.taps[t]: t for t in taps}
    if len(want) != len(taps):
        for t in taps:
            arch.tap_shape(t)
    acts = {}
    h = x
    for i, l in enumerate(arch.layers):
        if l.kind == "conv":
            h = ad.conv2d(h, params[f"{l.name}.weight"], params[f"{l.name}.bias"], l.stride, l.padding)
        elif l.kind == "relu":
            h = ad.relu(h)
        elif l.kind == "maxpool":
            h = ad.maxpool2x2(h)
        elif l.kind == "gap":
            h = ad.global_avg_pool(h)
        elif l.kind == "flatten":
            h = ad.flatten(h)
        elif l.kind == "linear":
            h = ad.linear(h, params[f"{l.name}.weight"], params[f"{l.name}.bias"])
        if i in want:
            acts[want[i]] = h
    return h, acts


def predict_logits(arch: ArchSpec, weights: ModelWeights, images: np.ndarray, batch_size: int = 200) -> np.ndarray:
    """Inference-only logits for a stack of images [N,C,H,W]."""
    out = []
    for s in range(0, len(images), batch_size):
        logits, _ = forward(arch, weights.params, images[s : s + batch_size])
        out.append(logits)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# KDM1 model file
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"KDM1"
MODEL_VERSION = 1


def save_model(path, arch: ArchSpec, weights: ModelWeights, meta: dict | None = None):
    """Write ``magic | version | header_len | JSON header | f32 params | f32 history``."""
    check_weights(arch, weights)
    header = {
        "arch": arch.to_dict(),
        "param_count": arch.param_count(),
        "history_len": len(weights.history),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    params = np.concatenate([weights.params[n].astype("<f4").ravel() for n, _ in arch.param_shapes()])
    hist = np.asarray(weights.history, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(params.tobytes())
        fh.write(hist.tobytes())


def load_model(path) -> tuple[ArchSpec, ModelWeights, dict]:
    """Returns ``(arch, weights, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError("model file shorter than its fixed header", len(blob))
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", 4)
    if 12 + hlen > len(blob):
        raise FormatError("header runs past end of file", len(blob))
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", 12) from exc
    count = int(header["param_count"])
    if count != arch.param_count():
        raise FormatError(f"header param_count {count} disagrees with architecture ({arch.param_count()})", 12)
    hist_len = int(header["history_len"])
    body = 12 + hlen
    expected = body + 4 * (count + 2 * hist_len)
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob) - body} does not match header ({expected - body})", min(len(blob), expected))
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=body).astype(np.float32)
    params = {}
    pos = 0
    for name, shape in arch.param_shapes():
        n = int(np.prod(shape))
        params[name] = flat[pos : pos + n].reshape(shape).copy()
        pos += n
    hist = np.frombuffer(blob, dtype="<f4", count=2 * hist_len, offset=body + 4 * count).reshape(-1, 2)
    history = [(float(a), float(b)) for a, b in hist]
    return arch, ModelWeights(params, history), header.get("meta", {})
