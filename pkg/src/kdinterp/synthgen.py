"""Synthetic ten-class shape dataset with ternary ground-truth masks.

Mask values: 0 background, 1 object pixels that only localize the object,
2 the class-distinguishing mark. Classes 0-2 are circle outlines, 3-5
rectangle outlines, 6-8 ellipses with a tail, 9 has no object.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .rng import Rng64, splitmix64

NUM_CLASSES = 10
NO_OBJECT = 9

OBJECT_INTENSITY = 0.85
MARK_INTENSITY = 1.0
STROKE = 2.0  # px
CENTER_JITTER = 0.15
SCALE_RANGE = (0.18, 0.30)

BACKGROUNDS = ("dark", "blurred", "noisy")

SPLIT_TAGS = {"train": 0x747261696E, "test": 0x74657374}

# class -> (category, base shape, distinguishing mark)
CLASS_CATALOG = {
    0: ("CIRCULAR", "circle_outline", "center_disk"),
    1: ("CIRCULAR", "circle_outline", "horizontal_bar"),
    2: ("CIRCULAR", "circle_outline", "twin_dots"),
    3: ("RECTANGULAR", "rect_outline", "main_diagonal"),
    4: ("RECTANGULAR", "rect_outline", "corner_notch"),
    5: ("RECTANGULAR", "rect_outline", "inner_rect"),
    6: ("TAIL", "ellipse_body", "tail_0deg"),
    7: ("TAIL", "ellipse_body", "tail_120deg"),
    8: ("TAIL", "ellipse_body", "tail_240deg"),
    9: ("NONE", "none", "none"),
}
CATEGORIES = ("CIRCULAR", "RECTANGULAR", "TAIL")


def category_of(label: int) -> str:
    return CLASS_CATALOG[int(label)][0]


def category_classes(category: str) -> list[int]:
    return [c for c, (cat, _, _) in CLASS_CATALOG.items() if cat == category]


def catalog_json() -> dict:
    return {
        "classes": [
            {"class": c, "category": cat, "base_shape": base, "mark": mark}
            for c, (cat, base, mark) in sorted(CLASS_CATALOG.items())
        ],
        "categories": list(CATEGORIES),
        "no_object_class": NO_OBJECT,
    }


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 6400
    n_test: int = 1600
    image_size: int = 64
    seed: int = 0
    center_jitter: float = CENTER_JITTER
    scale_range: tuple = SCALE_RANGE
    dark_level: tuple = (0.05, 0.03)  # base, noise amplitude
    noisy_level: tuple = (0.175, 0.175)  # center, half-range
    blurred_max: float = 0.3
    blur_grid: int = 8

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValidationError("n_train and n_test must be positive")
        if self.image_size < 32 or self.image_size % 2:
            raise ValidationError("image_size must be even and >= 32")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValidationError("scale_range must be increasing and positive")


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    label: int
    mask: np.ndarray  # [H,W] uint8 in {0,1,2}


@dataclass
class Dataset:
    """Column-stored samples."""

    images: np.ndarray  # [N,1,H,W] float32
    labels: np.ndarray  # [N] int64
    masks: np.ndarray | None = None  # [N,H,W] uint8
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), None if self.masks is None else self.masks[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], None if self.masks is None else self.masks[idx], dict(self.meta))

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.masks, dict(self.meta))

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


# ---------------------------------------------------------------------------
# Rasterization helpers (pixel (i, j) has coordinates y=i, x=j)
# ---------------------------------------------------------------------------


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ring(yy, xx, cy, cx, r, width=STROKE):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.abs(d - r) <= width / 2


def _box(yy, xx, cy, cx, hh, hw):
    return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)


def _box_outline(yy, xx, cy, cx, hh, hw, width=STROKE):
    return _box(yy, xx, cy, cx, hh, hw) & ~_box(yy, xx, cy, cx, hh - width, hw - width)


def _segment(yy, xx, y0, x0, y1, x1, width=STROKE):
    dy, dx = y1 - y0, x1 - x0
    t = ((yy - y0) * dy + (xx - x0) * dx) / (dy * dy + dx * dx)
    t = np.clip(t, 0.0, 1.0)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= (width / 2) ** 2


def draw_params(class_id: int, rng: Rng64, size: int, config: SynthConfig | None = None) -> dict:
    """Draw the jittered geometry of one object. Consumes rng draws in a fixed order."""
    cfg = config or SynthConfig()
    lo, hi = cfg.scale_range
    cy = size / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * size
    cx = size / 2 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * size
    s1 = rng.uniform(lo, hi) * size
    s2 = rng.uniform(lo, hi) * size
    return {"class": int(class_id), "cy": cy, "cx": cx, "r": s1, "half_w": s1, "half_h": s2}


def rasterize(params: dict, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Object and mark pixel sets for drawn geometry. Returns ``(object, mark)`` boolean maps."""
    yy, xx = _grid(size)
    c = params["class"]
    cy, cx = params["cy"], params["cx"]
    _, base, mark = CLASS_CATALOG[c]
    if base == "none":
        empty = np.zeros((size, size), dtype=bool)
        return empty, empty.copy()
    if base == "circle_outline":
        r = params["r"]
        body = _ring(yy, xx, cy, cx, r)
        if mark == "center_disk":
            feat = _disk(yy, xx, cy, cx, 0.25 * r)
        elif mark == "horizontal_bar":
            feat = _box(yy, xx, cy, cx, STROKE / 2, r - STROKE / 2)
        else:
            feat = _disk(yy, xx, cy, cx - 0.5 * r, 0.2 * r) | _disk(yy, xx, cy, cx + 0.5 * r, 0.2 * r)
    elif base == "rect_outline":
        hh, hw = params["half_h"], params["half_w"]
        body = _box_outline(yy, xx, cy, cx, hh, hw)
        if mark == "main_diagonal":
            feat = _segment(yy, xx, cy - hh, cx - hw, cy + hh, cx + hw)
        elif mark == "corner_notch":
            side = 0.35 * min(hh, hw)
            feat = (yy >= cy - hh) & (yy <= cy - hh + 2 * side) & (xx >= cx - hw) & (xx <= cx - hw + 2 * side)
        else:
            feat = _box_outline(yy, xx, cy, cx, 0.5 * hh, 0.5 * hw)
    else:  # ellipse body with a tail
        rx, ry = params["r"], 0.65 * params["r"]
        body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        angle = {"tail_0deg": 0.0, "tail_120deg": 120.0, "tail_240deg": 240.0}[mark]
        ux, uy = math.cos(math.radians(angle)), -math.sin(math.radians(angle))
        # boundary point of the ellipse along the tail direction
        t_edge = 1.0 / math.sqrt((ux / rx) ** 2 + (uy / ry) ** 2)
        x0, y0 = cx + ux * t_edge, cy + uy * t_edge
        length = 0.6 * params["r"]
        feat = _segment(yy, xx, y0, x0, y0 + uy * length, x0 + ux * length)
    return body | feat, feat


def _background(kind: str, rng: Rng64, size: int, cfg: SynthConfig) -> np.ndarray:
    if kind == "dark":
        base, amp = cfg.dark_level
        return base + amp * rng.uniform_array(size * size).astype(np.float64).reshape(size, size)
    if kind == "noisy":
        mid, half = cfg.noisy_level
        u = rng.uniform_array(size * size).astype(np.float64).reshape(size, size)
        return mid + half * (2.0 * u - 1.0)
    from .dissection import upsample_bilinear

    g = cfg.blur_grid
    coarse = rng.uniform_array(g * g).astype(np.float64).reshape(g, g)
    return cfg.blurred_max * upsample_bilinear(coarse, size, size)


def render_with_info(class_id: int, rng: Rng64, image_size: int, config: SynthConfig | None = None):
    """Render one sample: background, object at 0.85, mark at 1.0.

    Returns ``(image[1,H,W] float32, mask[H,W] uint8, info)``.
    """
    if not 0 <= class_id < NUM_CLASSES:
        raise ValidationError(f"class_id {class_id} outside 0..{NUM_CLASSES - 1}")
    cfg = config or SynthConfig(image_size=image_size)
    bg_kind = BACKGROUNDS[rng.randint(len(BACKGROUNDS))]
    params = draw_params(class_id, rng, image_size, cfg)
    img = _background(bg_kind, rng, image_size, cfg)
    obj, feat = rasterize(params, image_size)
    img[obj] = OBJECT_INTENSITY
    img[feat] = MARK_INTENSITY
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    mask[obj] = 1
    mask[feat] = 2
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None]
    return img, mask, {"background": bg_kind, **params}


def render_class(class_id: int, rng: Rng64, image_size: int, config: SynthConfig | None = None):
    img, mask, _ = render_with_info(class_id, rng, image_size, config)
    return img, mask


def sample_rng(seed: int, split: str, index: int) -> Rng64:
    return Rng64(splitmix64(seed ^ SPLIT_TAGS[split] ^ index))


def generate_sample(config: SynthConfig, split: str, index: int):
    label = index % NUM_CLASSES
    return render_with_info(label, sample_rng(config.seed, split, index), config.image_size, config)


def generate_split(config: SynthConfig, split: str) -> Dataset:
    """Deterministic split; labels cycle 0..9 so per-class counts differ by at most one."""
    if split not in SPLIT_TAGS:
        raise ValidationError(f"split must be one of {sorted(SPLIT_TAGS)}")
    n = config.n_train if split == "train" else config.n_test
    size = config.image_size
    images = np.empty((n, 1, size, size), dtype=np.float32)
    masks = np.empty((n, size, size), dtype=np.uint8)
    labels = np.arange(n, dtype=np.int64) % NUM_CLASSES
    for i in range(n):
        images[i], masks[i], _ = generate_sample(config, split, i)
    return Dataset(images, labels, masks, {"split": split, "seed": config.seed})


# ---------------------------------------------------------------------------
# KDS1 file format
# ---------------------------------------------------------------------------

DATA_MAGIC = b"KDS1"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


def _record_dtype(h, w, with_masks):
    fields = [("label", "<u2"), ("image", "<f4", (h * w,))]
    if with_masks:
        fields.append(("mask", "u1", (h * w,)))
    return np.dtype(fields)


def write_dataset(path, data: Dataset):
    n = len(data)
    if n == 0:
        raise ValidationError("cannot write an empty dataset")
    _, c, h, w = data.images.shape
    if c != 1:
        raise ValidationError("only single-channel images are supported")
    with_masks = data.masks is not None
    rec = np.zeros(n, dtype=_record_dtype(h, w, with_masks))
    rec["label"] = data.labels
    rec["image"] = data.images.reshape(n, h * w)
    if with_masks:
        rec["mask"] = data.masks.reshape(n, h * w)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, n, h, w, 1, int(with_masks)))
        fh.write(rec.tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the KDS1 header", len(blob))
    magic, version, n, h, w, channels, flags = _HEADER.unpack_from(blob, 0)
    if magic != DATA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATA_MAGIC!r}", 0)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if channels != 1:
        raise FormatError(f"unsupported channel count {channels}", 20)
    with_masks = bool(flags & 1)
    dt = _record_dtype(h, w, with_masks)
    need = _HEADER.size + n * dt.itemsize
    if len(blob) < need:
        raise FormatError(f"truncated payload: header declares {n} samples ({need} bytes), file has {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes after {n} samples", need)
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=_HEADER.size)
    masks = None
    if with_masks:
        masks = rec["mask"].reshape(n, h, w).copy()
        bad = np.flatnonzero(masks.reshape(-1) > 2)
        if bad.size:
            i, p = divmod(int(bad[0]), h * w)
            offset = _HEADER.size + i * dt.itemsize + dt.fields["mask"][1] + p
            raise FormatError(f"mask byte {masks.reshape(-1)[bad[0]]} not in {{0,1,2}}", offset)
    images = rec["image"].reshape(n, 1, h, w).astype(np.float32)
    labels = rec["label"].astype(np.int64)
    return Dataset(images, labels, masks)


def write_catalog(path):
    with open(path, "w") as fh:
        json.dump(catalog_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
