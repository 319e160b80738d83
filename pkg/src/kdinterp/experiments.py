"""Seeded experiment pipelines comparing scratch, KD, LS and feature-distilled students."""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .attribution import normalize01_batch, saliency_batch
from .config import RunConfig, from_dict
from .diffroar import random_attributor, saliency_attributor
from .diffroar import diffroar as run_diffroar
from .dissection import ConceptMaskSet, dissect
from .distill import evaluate, train
from .errors import KDError, ValidationError
from .metrics import GROUPINGS, binary_metrics, entropy_protocol, five_band_score
from .model import ArchSpec, ModelWeights, conv_net, load_model, save_model
from .report import write_json
from .synthgen import NO_OBJECT, Dataset, generate_split

log = logging.getLogger("kdinterp")

_TRAINING_MODULES = ("rng", "autodiff", "model", "synthgen", "distill")
_MEASUREMENT_MODULES = _TRAINING_MODULES + ("dissection", "attribution", "metrics", "diffroar")


@functools.lru_cache(maxsize=None)
def code_fingerprint(modules: tuple = _MEASUREMENT_MODULES) -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in modules:
        with open(os.path.join(here, name + ".py"), "rb") as fh:
            h.update(name.encode() + b"\0" + fh.read())
    return h.hexdigest()[:16]


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:20]


class ModelStore:
    """Content-addressed cache of trained models and memoized JSON results.

    Everything cached is a pure function of its key, so a hit is
    indistinguishable from recomputation. An empty directory disables caching.
    """

    def __init__(self, directory: str = ""):
        self.directory = directory
        if directory:
            os.makedirs(directory, exist_ok=True)

    _memo: dict = {}

    def model(self, key: dict, arch: ArchSpec, build) -> ModelWeights:
        key = {**key, "code": code_fingerprint(_TRAINING_MODULES)}
        digest = _key(key)
        if digest in self._memo:
            return self._memo[digest].copy()
        weights = self._load_or_build(key, digest, arch, build)
        self._memo[digest] = weights.copy()
        return weights

    def _load_or_build(self, key, digest, arch, build):
        if not self.directory:
            return build()
        path = os.path.join(self.directory, digest + ".kdm")
        if os.path.exists(path):
            _, weights, _ = load_model(path)
            return weights
        weights = build()
        tmp = f"{path}.{os.getpid()}.tmp"
        save_model(tmp, arch, weights, meta={"key": key})
        os.replace(tmp, path)
        return weights

    def json(self, key: dict, build):
        key = {**key, "code": code_fingerprint()}
        if not self.directory:
            return build()
        path = os.path.join(self.directory, _key(key) + ".json")
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)["value"]
        value = build()
        tmp = f"{path}.{os.getpid()}.tmp"
        with open(tmp, "w") as fh:
            json.dump({"key": key, "value": value}, fh, sort_keys=True)
        os.replace(tmp, path)
        return value


# ---------------------------------------------------------------------------
# Shared stages
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=2)
def _datasets(dataset_json: str):
    from .config import DatasetSection

    synth = from_dict(DatasetSection, json.loads(dataset_json)).synth()
    train_d = generate_split(synth, "train")
    test_d = generate_split(synth, "test")
    return train_d, test_d, ConceptMaskSet.from_dataset(test_d)


def datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, ConceptMaskSet]:
    return _datasets(json.dumps(cfg.to_dict()["dataset"], sort_keys=True))


def archs(cfg: RunConfig) -> tuple[ArchSpec, ArchSpec]:
    size = cfg.dataset.image_size
    return conv_net(tuple(cfg.student_widths), image_size=size), conv_net(tuple(cfg.teacher_widths), image_size=size)


class _Trainer:
    def __init__(self, cfg: RunConfig, train_d: Dataset):
        self.cfg = cfg
        self.data = train_d
        self.store = ModelStore(cfg.model_cache)
        self.data_key = cfg.to_dict()["dataset"]

    def __call__(self, name: str, arch: ArchSpec, seed: int, teacher=None, **train_kw):
        """Returns ``((arch, weights), key)``; ``teacher`` is a previous return value."""
        tc = self.cfg.train.config(seed=seed, **train_kw)
        key = {
            "arch": arch.to_dict(),
            "train": tc.to_dict(),
            "data": self.data_key,
            "teacher": None if teacher is None else teacher[1],
        }
        t0 = time.perf_counter()
        try:
            weights = self.store.model(
                key, arch, lambda: train(arch, self.data, tc, teacher=None if teacher is None else teacher[0])
            )
        except KDError as exc:
            raise type(exc)(f"training {name} (seed {seed}) failed: {exc}") from exc
        log.info("seed %d: %s ready (%.1fs)", seed, name, time.perf_counter() - t0)
        return (arch, weights), _key(key)


def _save(cfg: RunConfig, seed: int, name: str, model, extra: dict | None = None):
    arch, weights = model
    d = os.path.join(cfg.output_dir, f"seed{seed}")
    os.makedirs(d, exist_ok=True)
    save_model(os.path.join(d, f"{name}.kdm"), arch, weights, meta={"name": name, "seed": seed})
    if extra is not None:
        write_json(os.path.join(d, f"{name}_dissection.json"), extra)


def _dissect_eval(cfg, seed, name, model, test_d, concepts) -> dict:
    arch, weights = model
    try:
        rep = dissect(arch, weights, test_d, concepts, cfg.dissection.config())
    except KDError as exc:
        raise type(exc)(f"dissecting {name} (seed {seed}) failed: {exc}") from exc
    _save(cfg, seed, name, model, rep.to_json())
    return {
        "accuracy": evaluate(arch, weights, test_d),
        "total": rep.total,
        "unique": rep.unique,
        "groups": dict(rep.group_counts),
    }


def _attribution_scores(model, test_d) -> dict:
    """Five-band and binary metrics of saliency maps (true-label target) on object samples."""
    arch, weights = model
    keep = np.flatnonzero(test_d.labels != NO_OBJECT)
    sub = test_d.subset(keep)
    maps01 = normalize01_batch(saliency_batch(arch, weights, sub.images, sub.labels))
    fb = five_band_score(maps01, sub.masks)
    out = {
        "five_band": {"pixel_acc": fb.pixel_acc, "recall": fb.recall, "precision": fb.precision, "fpr": fb.fpr},
    }
    for g in GROUPINGS:
        out[g.lower()] = binary_metrics(maps01, sub.masks, g)
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def _fan_out(fn, jobs, workers: int):
    """Run ``fn(*job)`` for each job; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _check(cfg: RunConfig):
    cfg.validate()
    if len(cfg.seeds) < 3:
        raise ValidationError("experiments need at least 3 seeds")


def _report(kind: str, cfg: RunConfig, per_seed, seed_average, flags, timings, extra=None) -> dict:
    report = {
        "tool": {"name": "kdinterp", "version": __version__, "code_fingerprint": code_fingerprint()},
        "experiment": kind,
        "config": cfg.to_dict(),
        "per_seed": per_seed,
        "seed_average": seed_average,
        "flags": flags,
    }
    report.update(extra or {})
    report["timings"] = timings
    write_json(os.path.join(cfg.output_dir, f"{kind}_report.json"), report)
    return report


# ---------------------------------------------------------------------------
# Trend experiment
# ---------------------------------------------------------------------------

TREND_MODELS = ("scratch", "kd", "ls")


def _teacher(trainer, t_arch, seed):
    return trainer("teacher", t_arch, seed, mode="SCRATCH")


def _trend_models(cfg: RunConfig, seed: int):
    train_d, _, _ = datasets(cfg)
    s_arch, t_arch = archs(cfg)
    trainer = _Trainer(cfg, train_d)
    teacher = _teacher(trainer, t_arch, seed)
    students = {
        "scratch": trainer("scratch", s_arch, seed, mode="SCRATCH"),
        "kd": trainer("kd", s_arch, seed, teacher=teacher, mode="KD", alpha=cfg.kd.alpha, temperature=cfg.kd.temperature),
        "ls": trainer("ls", s_arch, seed, mode="LS", alpha=cfg.ls.alpha),
    }
    return teacher, students


def _trend_seed(cfg: RunConfig, seed: int):
    t0 = time.perf_counter()
    _, test_d, concepts = datasets(cfg)
    teacher, students = _trend_models(cfg, seed)
    t_train = time.perf_counter() - t0
    result = {"seed": seed, "teacher": {"accuracy": evaluate(*teacher[0], test_d)}, "models": {}}
    _save(cfg, seed, "teacher", teacher[0])
    for name in TREND_MODELS:
        model = students[name][0]
        try:
            row = _dissect_eval(cfg, seed, name, model, test_d, concepts)
            row.update(_attribution_scores(model, test_d))
        except KDError as exc:
            raise type(exc)(f"evaluating {name} (seed {seed}) failed: {exc}") from exc
        result["models"][name] = row
    ent = entropy_protocol([students[n][0] for n in TREND_MODELS], test_d, cfg.entropy_samples)
    result["entropy"] = {"empty": ent["empty"], "n_qualifying": ent["n_qualifying"]}
    for name, vals in zip(TREND_MODELS, ent["models"]):
        result["models"][name]["entropy"] = vals
    log.info("seed %d: trend measurements done", seed)
    return result, {"train_s": t_train, "total_s": time.perf_counter() - t0}


def _diffroar_job(cfg: RunConfig, name: str, fraction: float) -> dict:
    train_d, test_d, _ = datasets(cfg)
    seed = cfg.seeds[0]
    if name == "null":
        _, students = _trend_models(cfg, seed)
        base, base_key = students["scratch"]
        attributor = random_attributor(cfg.diffroar.null_seed)
        attr_key = {"random": cfg.diffroar.null_seed}
    else:
        _, students = _trend_models(cfg, seed)
        base, base_key = students[name]
        attributor = saliency_attributor(cfg.diffroar.target)
        attr_key = {"saliency": cfg.diffroar.target}
    dcfg = cfg.diffroar.config(cfg.train)
    single = type(dcfg)((fraction,), dcfg.n_seeds, dcfg.fill, dcfg.retrain, dcfg.target)
    key = {
        "diffroar": {"base": base_key, "attributor": attr_key, "fraction": fraction},
        "retrain": dcfg.retrain.to_dict(),
        "n_seeds": dcfg.n_seeds,
        "data": cfg.to_dict()["dataset"],
    }
    t0 = time.perf_counter()

    def build():
        try:
            return run_diffroar(base, train_d, test_d, attributor, single)["rows"]
        except KDError as exc:
            raise type(exc)(f"DiffROAR for {name} failed: {exc}") from exc

    rows = ModelStore(cfg.model_cache).json(key, build)
    log.info("DiffROAR %s fraction %.2f done (%.1fs)", name, fraction, time.perf_counter() - t0)
    return {"name": name, "rows": rows, "seconds": time.perf_counter() - t0}


def _diffroar_stage(cfg: RunConfig):
    names = ["scratch", "kd"] + (["null"] if cfg.diffroar.null_check else [])
    jobs = [(cfg, n, f) for n in names for f in cfg.diffroar.fractions]
    results = _fan_out(_diffroar_job, jobs, cfg.workers)
    out, seconds = {}, {}
    for n in names:
        rows = [r for res in results if res["name"] == n for r in res["rows"]]
        out[n] = {
            "base_model": f"{'scratch' if n == 'null' else n} (seed {cfg.seeds[0]})",
            "attributor": "random ranking" if n == "null" else f"saliency, {cfg.diffroar.target} class",
            "rows": rows,
            "aggregate": {"diffroar_mean": math.fsum(r["diffroar"] for r in rows) / len(rows), "n": len(rows)},
        }
        seconds[n] = math.fsum(res["seconds"] for res in results if res["name"] == n)
    out["metadata"] = {
        "sign": "acc(bottom removed) - acc(top removed), percentage points",
        "fill": "TRAIN_MEAN_PIXEL",
        "fractions": list(cfg.diffroar.fractions),
        "n_seeds": cfg.diffroar.n_seeds,
    }
    return out, seconds


def _trend_average(per_seed: list, diff: dict | None) -> list:
    rows = []
    for name in TREND_MODELS:
        ms = [s["models"][name] for s in per_seed]
        row = {
            "model": name,
            "total_detectors": _mean(m["total"] for m in ms),
            "unique_detectors": _mean(m["unique"] for m in ms),
            "accuracy": _mean(m["accuracy"] for m in ms),
            "five_band": {k: _mean(m["five_band"][k] for m in ms) for k in ("pixel_acc", "recall", "precision", "fpr")},
            "entropy_entire": _mean(m["entropy"] and m["entropy"]["entropy_entire"] for m in ms),
            "entropy_category": _mean(m["entropy"] and m["entropy"]["entropy_category"] for m in ms),
            "diffroar": diff[name]["aggregate"]["diffroar_mean"] if diff and name in diff else None,
        }
        for g in GROUPINGS:
            row[g.lower()] = {
                k: _mean(m[g.lower()]["pooled"][k] for m in ms) for k in ("auroc", "auprc", "f1")
            }
        rows.append(row)
    return rows


def _trend_flags(avg: list, diff: dict | None) -> dict:
    r = {row["model"]: row for row in avg}
    sc, kd, ls = r["scratch"], r["kd"], r["ls"]
    fs, fk = sc["five_band"], kd["five_band"]

    def ge(a, b, slack=0.0):
        return a is not None and b is not None and a >= b - slack

    flags = {
        "accuracy_kd_ge_scratch_minus_0.5pp": ge(kd["accuracy"], sc["accuracy"], 0.005),
        "detectors_kd_ge_scratch": ge(kd["total_detectors"], sc["total_detectors"]),
        "detectors_ls_le_scratch": ge(sc["total_detectors"], ls["total_detectors"]),
        "five_band_kd_ge_scratch": all(ge(fk[k], fs[k]) for k in ("pixel_acc", "recall", "precision"))
        and ge(fs["fpr"], fk["fpr"], 0.01),
        "entropy_category_kd_gt_ls": kd["entropy_category"] is not None
        and ls["entropy_category"] is not None
        and kd["entropy_category"] > ls["entropy_category"],
        "entropy_entire_ls_largest": ls["entropy_entire"] is not None
        and all(ge(ls["entropy_entire"], x["entropy_entire"]) for x in (sc, kd)),
    }
    if diff:
        flags["diffroar_kd_ge_scratch_minus_1pp"] = ge(
            diff["kd"]["aggregate"]["diffroar_mean"], diff["scratch"]["aggregate"]["diffroar_mean"], 1.0
        )
        if "null" in diff:
            flags["diffroar_null_within_2pp"] = abs(diff["null"]["aggregate"]["diffroar_mean"]) <= 2.0
    return flags


def exp_trend(cfg: RunConfig) -> dict:
    """Teacher, then scratch/KD/LS students per seed; dissection, five-band, entropy and optional DiffROAR."""
    _check(cfg)
    t0 = time.perf_counter()
    outs = _fan_out(_trend_seed, [(cfg, s) for s in cfg.seeds], cfg.workers)
    per_seed = [o[0] for o in outs]
    timings = {"per_seed": {str(s): o[1] for s, o in zip(cfg.seeds, outs)}}
    diff = None
    extra = {}
    if cfg.diffroar.enabled:
        diff, timings["diffroar_s"] = _diffroar_stage(cfg)
        extra["diffroar"] = diff
    avg = _trend_average(per_seed, diff)
    timings["total_s"] = time.perf_counter() - t0
    return _report("trend", cfg, per_seed, avg, _trend_flags(avg, diff), timings, extra)


# ---------------------------------------------------------------------------
# LS-teacher temperature experiment
# ---------------------------------------------------------------------------


def _ls_teacher_seed(cfg: RunConfig, seed: int):
    t0 = time.perf_counter()
    train_d, test_d, concepts = datasets(cfg)
    s_arch, t_arch = archs(cfg)
    trainer = _Trainer(cfg, train_d)
    lt = cfg.ls_teacher
    teacher = trainer("ls_teacher", t_arch, seed, mode="LS", alpha=lt.teacher_alpha)
    _save(cfg, seed, "ls_teacher", teacher[0])
    result = {"seed": seed, "teacher": {"accuracy": evaluate(*teacher[0], test_d)}, "students": []}
    for T in lt.temperatures:
        name = f"kd_T{T:g}"
        student = trainer(name, s_arch, seed, teacher=teacher, mode="KD", alpha=lt.student_alpha, temperature=float(T))
        row = _dissect_eval(cfg, seed, name, student[0], test_d, concepts)
        result["students"].append({"temperature": float(T), **row})
    return result, {"total_s": time.perf_counter() - t0}


def exp_ls_teacher(cfg: RunConfig) -> dict:
    """KD students of a label-smoothed teacher at each temperature."""
    _check(cfg)
    temps = [float(t) for t in cfg.ls_teacher.temperatures]
    if not temps or any(t <= 0 for t in temps):
        raise ValidationError("ls_teacher.temperatures must be positive")
    t0 = time.perf_counter()
    outs = _fan_out(_ls_teacher_seed, [(cfg, s) for s in cfg.seeds], cfg.workers)
    per_seed = [o[0] for o in outs]
    avg = []
    for i, T in enumerate(temps):
        rows = [s["students"][i] for s in per_seed]
        avg.append(
            {
                "temperature": T,
                "total_detectors": _mean(r["total"] for r in rows),
                "unique_detectors": _mean(r["unique"] for r in rows),
                "accuracy": _mean(r["accuracy"] for r in rows),
            }
        )
    by_t = {r["temperature"]: r["total_detectors"] for r in avg}
    lo, hi = min(temps), max(temps)
    flags = {f"detectors_T{hi:g}_ge_T{lo:g}": by_t[hi] >= by_t[lo]}
    timings = {"per_seed": {str(s): o[1] for s, o in zip(cfg.seeds, outs)}, "total_s": time.perf_counter() - t0}
    extra = {"teacher_accuracy": _mean(s["teacher"]["accuracy"] for s in per_seed)}
    return _report("ls_teacher", cfg, per_seed, avg, flags, timings, extra)


# ---------------------------------------------------------------------------
# Attention transfer with and without logit distillation
# ---------------------------------------------------------------------------


def _at_seed(cfg: RunConfig, seed: int):
    t0 = time.perf_counter()
    train_d, test_d, concepts = datasets(cfg)
    s_arch, t_arch = archs(cfg)
    trainer = _Trainer(cfg, train_d)
    teacher = _teacher(trainer, t_arch, seed)
    at = cfg.at
    common = {"mode": "KD_PLUS_AT", "temperature": at.temperature, "at_weight": at.weight, "at_tap": cfg.dissection.tap}
    variants = {
        "at_only": trainer("at_only", s_arch, seed, teacher=teacher, alpha=0.0, **common),
        "at_plus_logit": trainer("at_plus_logit", s_arch, seed, teacher=teacher, alpha=at.alpha, **common),
    }
    result = {"seed": seed, "models": {}}
    for name, (model, _) in variants.items():
        result["models"][name] = _dissect_eval(cfg, seed, name, model, test_d, concepts)
    return result, {"total_s": time.perf_counter() - t0}


def exp_logit_plus_at(cfg: RunConfig) -> dict:
    """Attention-transfer students trained without (alpha=0) and with logit distillation."""
    _check(cfg)
    t0 = time.perf_counter()
    outs = _fan_out(_at_seed, [(cfg, s) for s in cfg.seeds], cfg.workers)
    per_seed = [o[0] for o in outs]
    avg = []
    for name in ("at_only", "at_plus_logit"):
        ms = [s["models"][name] for s in per_seed]
        avg.append(
            {
                "model": name,
                "total_detectors": _mean(m["total"] for m in ms),
                "unique_detectors": _mean(m["unique"] for m in ms),
                "accuracy": _mean(m["accuracy"] for m in ms),
            }
        )
    flags = {"detectors_at_plus_logit_ge_at_only": avg[1]["total_detectors"] >= avg[0]["total_detectors"]}
    timings = {"per_seed": {str(s): o[1] for s, o in zip(cfg.seeds, outs)}, "total_s": time.perf_counter() - t0}
    return _report("logit_plus_at", cfg, per_seed, avg, flags, timings)


EXPERIMENTS = {"exp-trend": exp_trend, "exp-ls-teacher": exp_ls_teacher, "exp-logit-plus-at": exp_logit_plus_at}
