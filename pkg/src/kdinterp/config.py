"""JSON run configuration with strict (unknown-key-rejecting) parsing."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .diffroar import DiffRoarConfig
from .dissection import DissectionConfig
from .distill import DEFAULT_AT_WEIGHT, TrainConfig
from .errors import ValidationError
from .synthgen import SynthConfig


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 6400
    n_test: int = 1600
    image_size: int = 64
    seed: int = 7

    def synth(self) -> SynthConfig:
        return SynthConfig(n_train=self.n_train, n_test=self.n_test, image_size=self.image_size, seed=self.seed)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 4
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 5e-5
    optimizer: str = "ADAM"

    def config(self, **kw) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            optimizer=self.optimizer,
            **kw,
        )


@dataclass(frozen=True)
class KDSection:
    alpha: float = 0.5
    temperature: float = 4.0


@dataclass(frozen=True)
class LSSection:
    alpha: float = 0.1


@dataclass(frozen=True)
class LSTeacherSection:
    teacher_alpha: float = 0.1
    student_alpha: float = 0.5
    temperatures: tuple = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class ATSection:
    weight: float = DEFAULT_AT_WEIGHT
    alpha: float = 0.5
    temperature: float = 4.0


@dataclass(frozen=True)
class DissectionSection:
    tap: str = "layer3"
    quantile: float = 0.005
    iou_threshold: float = 0.05

    def config(self) -> DissectionConfig:
        return DissectionConfig(self.tap, self.quantile, self.iou_threshold)


@dataclass(frozen=True)
class DiffRoarSection:
    enabled: bool = False
    fractions: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    n_seeds: int = 5
    retrain_epochs: int = 4
    target: str = "PREDICTED"
    null_check: bool = True
    null_seed: int = 12345

    def config(self, train: TrainSection) -> DiffRoarConfig:
        retrain = train.config(mode="SCRATCH").with_(epochs=self.retrain_epochs)
        return DiffRoarConfig(tuple(self.fractions), self.n_seeds, "TRAIN_MEAN_PIXEL", retrain, self.target)


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    student_widths: tuple = (8, 16, 32)
    teacher_widths: tuple = (16, 32, 64)
    train: TrainSection = field(default_factory=TrainSection)
    kd: KDSection = field(default_factory=KDSection)
    ls: LSSection = field(default_factory=LSSection)
    ls_teacher: LSTeacherSection = field(default_factory=LSTeacherSection)
    at: ATSection = field(default_factory=ATSection)
    dissection: DissectionSection = field(default_factory=DissectionSection)
    entropy_samples: int = 1000
    diffroar: DiffRoarSection = field(default_factory=DiffRoarSection)
    output_dir: str = "runs/default"
    workers: int = 1
    model_cache: str = ""

    def validate(self):
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct")
        self.dataset.synth()
        self.train.config()
        self.dissection.config()
        if self.diffroar.enabled:
            self.diffroar.config(self.train)
        if self.entropy_samples < 1:
            raise ValidationError("entropy_samples must be >= 1")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        return self

    def to_dict(self) -> dict:
        return to_jsonable(self)


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    return obj


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected an object")
        return from_dict(tp, value, where + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(f"{where}: expected a string")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, list):
            raise ValidationError(f"{where}: expected a list")
        return tuple(value)
    return value


def from_dict(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, where + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where or 'config'}: {exc}") from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(RunConfig, data).validate()
