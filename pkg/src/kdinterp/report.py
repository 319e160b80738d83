"""Binary PGM rendering and deterministic JSON report writing."""

from __future__ import annotations

import json
import math
import os

import numpy as np

from .errors import FormatError, ShapeError, ValidationError


def quantize(values) -> np.ndarray:
    """Linear min->0 / max->255 scaling with round-half-up; constant input gives zeros."""
    a = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ShapeError(f"render expects a 2-D map, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("cannot render non-finite values")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    scaled = (a - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def pgm_bytes(values) -> bytes:
    q = quantize(values)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def render(values, path) -> np.ndarray:
    """Write ``values`` (a map or single-channel image) as a P5 PGM; returns the quantized pixels."""
    data = pgm_bytes(values)
    with open(path, "wb") as fh:
        fh.write(data)
    return quantize(values)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", 0)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", pos)
    pos += 1
    body = raw[pos:]
    if len(body) != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(body)}", pos)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings"}
