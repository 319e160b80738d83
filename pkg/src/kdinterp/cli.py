"""Command-line entry point: ``kdinterp <subcommand> [--config c.json] [flags]``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .attribution import integrated_gradients, loss_gradient_batch, normalize01_batch, saliency_batch
from .config import RunConfig, load_run_config
from .diffroar import diffroar, random_attributor, saliency_attributor
from .dissection import ConceptMaskSet, DissectionConfig, collect_activations, dissect, sweep
from .distill import MODES, evaluate, predictions, train
from .errors import ContractError, FormatError, KDError, ParameterError, ShapeError, ValidationError
from .experiments import EXPERIMENTS
from .metrics import GROUPINGS, binary_metrics, entropy_protocol, five_band_score
from .model import conv_net, load_model, save_model
from .report import render, write_json
from .synthgen import NO_OBJECT, generate_split, read_dataset, write_catalog, write_dataset

log = logging.getLogger("kdinterp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=JSON",
        help="config override, e.g. --set train.epochs=2 (repeatable)",
    )
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdinterp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kdinterp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate train.kds, test.kds and catalog.json")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--data-seed", type=int)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--mode", default="scratch", type=str.upper, choices=MODES)
    p.add_argument("--arch", default="student", choices=("student", "teacher"))
    p.add_argument("--teacher", help="teacher model file (kd, self_kd, kd_plus_at)")
    p.add_argument("--data", help="training set (default: <out>/train.kds)")
    p.add_argument("--test-data", help="evaluation set (default: <out>/test.kds if present)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--at-weight", type=float)
    p.add_argument("--name", help="output stem (default: <mode>_seed<seed>)")

    for name, helptext in (("dissect", "network dissection report"), ("sweep", "quantile x IoU-threshold sweep")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--model", required=True)
        p.add_argument("--data", help="annotated dataset (default: <out>/test.kds)")
        p.add_argument("--tap")
        if name == "dissect":
            p.add_argument("--quantile", type=float)
            p.add_argument("--iou-threshold", type=float)

    p = sub.add_parser("attribute", help="attribution maps for selected samples")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--kind", default="saliency", choices=("saliency", "loss_grad", "ig"))
    p.add_argument("--index", type=int, nargs="+", default=[0])
    p.add_argument("--target", type=int, help="target class (default: the sample label)")
    p.add_argument("--steps", type=int, default=128, help="integrated-gradients steps")

    p = sub.add_parser("fiveband", help="five-band and binary scores of saliency maps")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--target", default="label", choices=("label", "predicted"))

    p = sub.add_parser("entropy", help="output entropies over commonly-correct samples")
    _common(p)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--n-samples", type=int)

    p = sub.add_parser("diffroar", help="remove-and-retrain score of an attribution ranking")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--train-data")
    p.add_argument("--data")
    p.add_argument("--attributor", default="saliency", choices=("saliency", "random"))
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--retrain-epochs", type=int)
    p.add_argument("--random-seed", type=int, default=12345)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"{name[4:]} experiment over all configured seeds")
        _common(p)
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--workers", type=int)
        p.add_argument("--cache", help="model cache directory")

    p = sub.add_parser("render", help="write an image, attribution or activation map as binary PGM")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--model")
    p.add_argument("--kind", default="image", choices=("image", "saliency", "loss_grad", "ig", "activation"))
    p.add_argument("--unit", type=int, default=0, help="unit for --kind activation")
    p.add_argument("--output", required=True, help="destination .pgm file")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args, extra: dict | None = None) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=JSON, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    if args.out:
        overrides["output_dir"] = args.out
    return load_run_config(args.config, overrides)


def _data_path(cfg, given, default_name):
    path = given or os.path.join(cfg.output_dir, default_name)
    if not os.path.exists(path):
        raise ValidationError(f"dataset {path} not found (run 'kdinterp gen' first or pass --data)")
    return path


def _model(path):
    arch, weights, meta = load_model(path)
    return arch, weights, meta


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _dump(cfg, name, obj) -> str:
    path = os.path.join(cfg.output_dir, name)
    write_json(path, obj)
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args):
    cfg = _config(
        args,
        {
            "dataset.n_train": args.n_train,
            "dataset.n_test": args.n_test,
            "dataset.image_size": args.image_size,
            "dataset.seed": args.data_seed,
        },
    )
    synth = cfg.dataset.synth()
    os.makedirs(cfg.output_dir, exist_ok=True)
    for split in ("train", "test"):
        write_dataset(os.path.join(cfg.output_dir, f"{split}.kds"), generate_split(synth, split))
    write_catalog(os.path.join(cfg.output_dir, "catalog.json"))
    return f"wrote {synth.n_train} train / {synth.n_test} test samples to {cfg.output_dir}"


def cmd_train(args):
    cfg = _config(
        args,
        {
            "train.epochs": args.epochs,
            "train.batch_size": args.batch_size,
            "train.learning_rate": args.lr,
        },
    )
    data = read_dataset(_data_path(cfg, args.data, "train.kds"))
    widths = cfg.student_widths if args.arch == "student" else cfg.teacher_widths
    arch = conv_net(tuple(widths), image_size=data.images.shape[-1])
    mode = args.mode
    defaults = {"LS": (cfg.ls.alpha, 1.0), "KD_PLUS_AT": (cfg.at.alpha, cfg.at.temperature)}
    alpha, temperature = defaults.get(mode, (cfg.kd.alpha, cfg.kd.temperature))
    tc = cfg.train.config(
        mode=mode,
        seed=args.seed,
        alpha=alpha if args.alpha is None else args.alpha,
        temperature=temperature if args.temperature is None else args.temperature,
        at_weight=cfg.at.weight if args.at_weight is None else args.at_weight,
        at_tap=cfg.dissection.tap,
    )
    teacher = None
    if args.teacher:
        t_arch_loaded, t_weights, _ = _model(args.teacher)
        teacher = (t_arch_loaded, t_weights)
    weights = train(arch, data, tc, teacher=teacher)
    name = args.name or f"{mode.lower()}_seed{args.seed}"
    os.makedirs(cfg.output_dir, exist_ok=True)
    model_path = os.path.join(cfg.output_dir, f"{name}.kdm")
    save_model(model_path, arch, weights, meta={"train": tc.to_dict(), "teacher": args.teacher})
    summary = {"model": model_path, "train": tc.to_dict(), "history": [list(h) for h in weights.history]}
    test_path = args.test_data or os.path.join(cfg.output_dir, "test.kds")
    if os.path.exists(test_path):
        summary["test_accuracy"] = evaluate(arch, weights, read_dataset(test_path))
    _dump(cfg, f"{name}_history.json", summary)
    acc = summary.get("test_accuracy")
    return f"trained {name}: final loss {weights.history[-1][0]:.4f}" + (f", test accuracy {acc:.4f}" if acc is not None else "")


def _dissection_config(cfg, args):
    d = cfg.dissection
    return DissectionConfig(
        args.tap or d.tap,
        getattr(args, "quantile", None) or d.quantile,
        getattr(args, "iou_threshold", None) or d.iou_threshold,
    )


def cmd_dissect(args):
    cfg = _config(args)
    arch, weights, _ = _model(args.model)
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    dc = _dissection_config(cfg, args)
    rep = dissect(arch, weights, data, ConceptMaskSet.from_dataset(data), dc)
    path = _dump(cfg, f"{_stem(args.model)}_dissection.json", {"model": args.model, **rep.to_json()})
    return f"{rep.total} concept detectors ({rep.unique} unique) at {dc.tap}; report {path}"


def cmd_sweep(args):
    cfg = _config(args)
    arch, weights, _ = _model(args.model)
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    tap = args.tap or cfg.dissection.tap
    rows = sweep(arch, weights, data, ConceptMaskSet.from_dataset(data), tap=tap)
    path = _dump(cfg, f"{_stem(args.model)}_sweep.json", {"model": args.model, "tap": tap, "rows": rows})
    return f"sweep of {len(rows)} settings written to {path}"


def _attribution(arch, weights, images, targets, kind, steps=128):
    if kind == "saliency":
        return saliency_batch(arch, weights, images, targets)
    if kind == "loss_grad":
        return loss_gradient_batch(arch, weights, images, targets)
    return np.stack([integrated_gradients(arch, weights, x, steps=steps, target_class=int(t)).values for x, t in zip(images, targets)])


def _indices(data, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(data)):
        raise ValidationError(f"index outside 0..{len(data) - 1}")
    return idx


def cmd_attribute(args):
    cfg = _config(args)
    arch, weights, _ = _model(args.model)
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    idx = _indices(data, args.index)
    targets = np.full(len(idx), args.target) if args.target is not None else data.labels[idx]
    maps = _attribution(arch, weights, data.images[idx], targets, args.kind, args.steps)
    stem = _stem(args.model)
    os.makedirs(cfg.output_dir, exist_ok=True)
    for i, t, m in zip(idx, targets, maps):
        render(m, os.path.join(cfg.output_dir, f"{stem}_{args.kind}_{i}.pgm"))
    path = _dump(
        cfg,
        f"{stem}_{args.kind}.json",
        {
            "model": args.model,
            "kind": args.kind,
            "samples": [{"index": int(i), "target": int(t), "values": m.tolist()} for i, t, m in zip(idx, targets, maps)],
        },
    )
    return f"{len(idx)} {args.kind} map(s) written to {path}"


def cmd_fiveband(args):
    cfg = _config(args)
    arch, weights, _ = _model(args.model)
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    if data.masks is None:
        raise ValidationError("dataset has no masks")
    sub = data.subset(np.flatnonzero(data.labels != NO_OBJECT))
    targets = sub.labels if args.target == "label" else predictions(arch, weights, sub)
    maps01 = normalize01_batch(saliency_batch(arch, weights, sub.images, targets))
    fb = five_band_score(maps01, sub.masks)
    out = {"model": args.model, "target": args.target, "n_samples": len(sub), "five_band": fb.__dict__}
    for g in GROUPINGS:
        out[g.lower()] = binary_metrics(maps01, sub.masks, g)
    path = _dump(cfg, f"{_stem(args.model)}_fiveband.json", out)
    return "five-band (acc, recall, precision, fpr) = ({:.4f}, {:.4f}, {:.4f}, {:.4f}); report {}".format(*fb.as_tuple(), path)


def cmd_entropy(args):
    cfg = _config(args, {"entropy_samples": args.n_samples})
    models = [_model(p)[:2] for p in args.models]
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    res = entropy_protocol(models, data, cfg.entropy_samples)
    res["model_files"] = list(args.models)
    path = _dump(cfg, "entropy.json", res)
    return f"entropies over {res['n_qualifying']} commonly-correct samples written to {path}"


def cmd_diffroar(args):
    cfg = _config(
        args,
        {
            "diffroar.fractions": args.fractions,
            "diffroar.n_seeds": args.n_seeds,
            "diffroar.retrain_epochs": args.retrain_epochs,
        },
    )
    arch, weights, _ = _model(args.model)
    train_d = read_dataset(_data_path(cfg, args.train_data, "train.kds"))
    test_d = read_dataset(_data_path(cfg, args.data, "test.kds"))
    attributor = random_attributor(args.random_seed) if args.attributor == "random" else saliency_attributor(cfg.diffroar.target)
    res = diffroar((arch, weights), train_d, test_d, attributor, cfg.diffroar.config(cfg.train))
    res["attributor"] = args.attributor
    path = _dump(cfg, f"{_stem(args.model)}_diffroar_{args.attributor}.json", res)
    return f"DiffROAR mean {res['aggregate']['diffroar_mean']:+.2f} pp over {res['aggregate']['n']} runs; report {path}"


def cmd_experiment(args):
    cfg = _config(args, {"seeds": args.seeds, "workers": args.workers, "model_cache": args.cache})
    report = EXPERIMENTS[args.command](cfg)
    passed = sum(bool(v) for v in report["flags"].values())
    return f"{args.command}: {passed}/{len(report['flags'])} trend flags pass; report in {cfg.output_dir}"


def cmd_render(args):
    cfg = _config(args)
    data = read_dataset(_data_path(cfg, args.data, "test.kds"))
    i = int(_indices(data, [args.index])[0])
    if args.kind == "image":
        values = data.images[i]
    else:
        if not args.model:
            raise ValidationError(f"--kind {args.kind} needs --model")
        arch, weights, _ = _model(args.model)
        if args.kind == "activation":
            tap = cfg.dissection.tap
            acts = collect_activations(arch, weights, data.subset(np.array([i])), tap)
            if not 0 <= args.unit < len(acts):
                raise ValidationError(f"unit outside 0..{len(acts) - 1}")
            values = acts[args.unit, 0]
        else:
            values = _attribution(arch, weights, data.images[i : i + 1], data.labels[i : i + 1], args.kind)[0]
    render(values, args.output)
    return f"wrote {args.output}"


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "dissect": cmd_dissect,
    "sweep": cmd_sweep,
    "attribute": cmd_attribute,
    "fiveband": cmd_fiveband,
    "entropy": cmd_entropy,
    "diffroar": cmd_diffroar,
    "render": cmd_render,
    **{name: cmd_experiment for name in EXPERIMENTS},
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        print(COMMANDS[args.command](args))
    except (ValidationError, ParameterError, ShapeError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, KDError, OSError, MemoryError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
