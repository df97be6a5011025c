"""Flat ``section.key = value`` experiment configuration.

Every key has a default; unknown keys and malformed values are fatal.
"""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

from .datasets import (
    FixedTotal,
    LabeledDataset,
    PerClass,
    TaskProtocol,
    TrainTest,
    gen_synthetic_manifolds,
    load_idx,
)
from .losses import LossConfig
from .trainer import ABLATIONS, ModelConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    seed: int = 0
    num_classes: int = 10
    clusters_per_class: int = 2
    dim: int = 32
    samples_per_class: int = 200
    cluster_spread: float = 1.0
    cluster_separation: float = 4.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ProtocolConfig:
    base: int = 5
    increment: int = 1
    memory_policy: str = "per_class"
    memory_size: int = 20
    selection: str = "herding"
    # comma-separated class ids; empty means a seeded shuffle
    class_order: str = ""
    seed: int = 0

    def build(self) -> TaskProtocol:
        if self.memory_policy == "per_class":
            policy = PerClass(self.memory_size)
        elif self.memory_policy == "fixed_total":
            policy = FixedTotal(self.memory_size)
        else:
            raise ConfigError(f"protocol.memory_policy must be per_class or fixed_total, got {self.memory_policy!r}")
        order = [int(c) for c in self.class_order.split(",")] if self.class_order.strip() else None
        return TaskProtocol(self.base, self.increment, order, policy)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: str = "full"

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, loss=self.loss)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            protocol=dataclasses.replace(self.protocol, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


SECTIONS = ("dataset", "protocol", "model", "train", "loss")
_SKIP = {("train", "loss")}


def _section_fields(section: str):
    obj_type = {f.name: f for f in fields(ExperimentConfig)}[section]
    cls = obj_type.default_factory  # type: ignore[misc]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if (section, f.name) not in _SKIP}


def _coerce(raw: str, tp, key: str, line: int | None):
    raw = raw.strip()
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            (inner, *_rest) = typing.get_args(tp)
            return tuple(inner(v) for v in raw.split(",") if v.strip()) if raw else ()
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", line, key) from None
    raise ConfigError(f"unsupported type for {key}", line, key)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    ablation = "full"
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        seen.add(key)
        if key == "ablation":
            if raw not in ABLATIONS:
                raise ConfigError(f"ablation must be one of {', '.join(ABLATIONS)}, got {raw!r}", lineno, key)
            ablation = raw
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        known = _section_fields(section)
        if name not in known:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        values[section][name] = _coerce(raw, known[name], key, lineno)
    try:
        cfg = ExperimentConfig(
            dataset=DatasetConfig(**values["dataset"]),
            protocol=ProtocolConfig(**values["protocol"]),
            model=ModelConfig(**values["model"]),
            train=TrainConfig(**values["train"]),
            loss=LossConfig(**values["loss"]),
            ablation=ablation,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    cfg.protocol.build()
    return cfg


IDX_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels")


def load_config(path) -> ExperimentConfig:
    """Parse a config file; relative IDX paths are taken from the file's directory."""
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    base = os.path.dirname(os.path.abspath(path))
    resolved = {
        k: os.path.normpath(os.path.join(base, v))
        for k in IDX_PATH_KEYS
        if (v := getattr(cfg.dataset, k)) and not os.path.isabs(v)
    }
    return dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, **resolved))


def config_items(cfg: ExperimentConfig) -> dict[str, str]:
    """Every key with its formatted value, in a stable order."""
    out = {"ablation": cfg.ablation}
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for name in _section_fields(section):
            out[f"{section}.{name}"] = _format(getattr(obj, name))
    return out


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg).items())


def build_data(cfg: DatasetConfig) -> TrainTest:
    if cfg.kind == "synthetic":
        return gen_synthetic_manifolds(
            cfg.seed,
            cfg.num_classes,
            cfg.clusters_per_class,
            cfg.dim,
            cfg.samples_per_class,
            cfg.cluster_spread,
            cfg.cluster_separation,
        )
    if cfg.kind == "idx":
        missing = [k for k in IDX_PATH_KEYS if not getattr(cfg, k)]
        if missing:
            raise ConfigError(f"idx dataset needs {', '.join('dataset.' + m for m in missing)}")
        train = load_idx(cfg.train_images, cfg.train_labels, "train")
        test = load_idx(cfg.test_images, cfg.test_labels, "test")
        n = max(train.num_classes, test.num_classes)
        return TrainTest(
            LabeledDataset(train.samples, train.labels, n, "train"),
            LabeledDataset(test.samples, test.labels, n, "test"),
        )
    raise ConfigError(f"dataset.kind must be synthetic or idx, got {cfg.kind!r}")
