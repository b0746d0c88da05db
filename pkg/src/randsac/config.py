"""Flat ``key = value`` experiment configuration.

Precedence is CLI ``--set`` over file over defaults. Every key must be
known; values are parsed according to the type of the default. The content
hash covers everything except ``out.dir`` and is independent of key order.
Pretraining artifacts live under a second hash that also leaves out the
evaluation-only keys, so probing settings can change without retraining.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigurationError
from .layout import PartitionSpec
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULTS: dict[str, Any] = {
    "data.path": "data/cifar-10-batches-bin",
    "data.test_path": "",
    "data.variant": "cifar10",
    "data.train_subset": 0,
    "data.test_subset": 0,
    "model.dim": 64,
    "model.heads": 4,
    "model.enc_layers": 4,
    "model.dec_layers": 2,
    "model.mlp_ratio": 4,
    "model.patch": 4,
    "model.dtype": "float32",
    "train.base_lr": 1e-3,
    "train.batch_size": 128,
    "train.weight_decay": 0.05,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.warmup_epochs": 10,
    "train.epochs": 100,
    "train.seed": 0,
    "train.loss_mode": "raw",
    "train.exclude_first_segment_loss": False,
    "train.grad_clip": 0.0,
    "train.augment": True,
    "train.checkpoint_every": 10,
    "train.deterministic": False,
    "partition.kind": "blob",
    "partition.order": "random",
    "partition.square_size": 2,
    "partition.levels": (11, 5),
    "partition.shuffle": False,
    "partition.strict": False,
    "eval.probe_epochs": 30,
    "eval.probe_lr": 1e-2,
    "eval.probe_batch": 256,
    "eval.finetune_epochs": 0,
    "eval.finetune_lr": 5e-4,
    "eval.finetune_batch": 128,
    "eval.finetune_warmup": 5,
    "eval.layer_decay": 0.65,
    "out.dir": "out",
}
UNHASHED = ("out.dir",)
# Keys that only affect evaluation; the pretraining directory ignores them.
EVAL_ONLY = ("eval.", "data.test_path", "data.test_subset")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: str, text: str) -> Any:
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace("->", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigurationError(f"bad value {text!r} for {key} (expected {type(default).__name__})") from None
    return text


def parse_assignment(line: str) -> tuple[str, Any]:
    if "=" not in line:
        raise ConfigurationError(f"expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    return key, parse_value(key, value)


def read_config_file(path: str | Path) -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}:{lineno}: {exc}") from None
        values[key] = value
    return values


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    @classmethod
    def build(cls, file: str | Path | None = None, overrides: Iterable[str] = (),
              base: Mapping[str, Any] | None = None) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if base:
            values.update(base)
        if file is not None:
            values.update(read_config_file(file))
        for item in overrides:
            key, value = parse_assignment(item)
            values[key] = value
        cfg = cls(values)
        cfg.validate()
        return cfg

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        for key in overrides:
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
        cfg = ExperimentConfig({**self.values, **overrides})
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        self.train_config()
        self.partition_spec()
        if self["data.variant"] not in ("cifar10", "cifar100", "imagedir"):
            raise ConfigurationError(f"data.variant {self['data.variant']!r} not one of cifar10, cifar100, imagedir")

    def canonical(self, skip: tuple[str, ...] = ()) -> str:
        data = {k: list(v) if isinstance(v, tuple) else v
                for k, v in sorted(self.values.items())
                if k not in UNHASHED and not k.startswith(skip)}
        return json.dumps(data, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]

    @property
    def pretrain_hash(self) -> str:
        return hashlib.sha256(self.canonical(EVAL_ONLY).encode()).hexdigest()[:12]

    def diff(self, other: "ExperimentConfig") -> dict[str, tuple[Any, Any]]:
        return {k: (self.values[k], other.values[k]) for k in DEFAULTS
                if self.values[k] != other.values[k]}

    def output_dir(self) -> Path:
        return Path(self["out.dir"]) / self.pretrain_hash

    def model_config(self, image_size: tuple[int, int] = (32, 32), channels: int = 3, **kw) -> ModelConfig:
        return ModelConfig(dim=self["model.dim"], heads=self["model.heads"],
                           enc_layers=self["model.enc_layers"], dec_layers=self["model.dec_layers"],
                           mlp_ratio=self["model.mlp_ratio"], patch=self["model.patch"],
                           image_size=image_size, channels=channels, dtype=self["model.dtype"], **kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")})

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(kind=self["partition.kind"], order=self["partition.order"],
                             square_size=self["partition.square_size"], levels=self["partition.levels"],
                             shuffle=self["partition.shuffle"], strict=self["partition.strict"])

    def partition_label(self) -> str:
        spec = self.partition_spec()
        if spec.kind == "blob":
            shape = "blob" + "->".join(str(k) for k in spec.levels)
        elif spec.kind == "square":
            shape = f"square{spec.square_size}"
        else:
            shape = "pixel" if self["model.patch"] == 1 else "patch"
        return f"{shape}-{spec.order}" + ("-shuffled" if spec.shuffle else "")
