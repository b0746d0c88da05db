"""Linear probing and end-to-end fine-tuning of the pretrained encoder."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetHandle
from .errors import ConfigurationError
from .model import RandSAC
from .tensor import Tensor
from .trainer import AdamW, TrainConfig, augment, lr_at, sample_rng

REPORT_FIELDS = ("mode", "top1", "per_class", "config_hash", "checkpoint_id", "partition",
                 "requested_K", "realized_K", "seed", "epochs", "note")


@dataclass
class EvalReport:
    mode: str
    top1: float
    per_class: list[float]
    config_hash: str = ""
    checkpoint_id: str = ""
    partition: str = ""
    requested_K: int | None = None
    realized_K: float | None = None
    seed: int = 0
    epochs: int = 0
    note: str = ""
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "top1": f"{self.top1:.6f}",
            "per_class": " ".join(f"{a:.4f}" for a in self.per_class),
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "partition": self.partition,
            "requested_K": "" if self.requested_K is None else self.requested_K,
            "realized_K": "" if self.realized_K is None else f"{self.realized_K:.4f}",
            "seed": self.seed,
            "epochs": self.epochs,
            "note": self.note,
        }


def append_results(path: str | Path, row: dict, fields=REPORT_FIELDS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        if new:
            writer.writeheader()
        writer.writerow(row)


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ConfigurationError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ConfigurationError("accuracy of an empty prediction set")
    return float((predictions == labels).mean())


def per_class_accuracy(predictions, labels, num_classes: int) -> list[float]:
    out = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float((predictions[sel] == c).mean()) if sel.any() else float("nan"))
    return out


def parameter_checksum(model: RandSAC, names=None) -> str:
    h = hashlib.sha256()
    for name in names if names is not None else model.params:
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


def _check_classes(train: DatasetHandle) -> None:
    present = np.unique(train.labels)
    if len(present) != train.num_classes:
        missing = sorted(set(range(train.num_classes)) - set(present.tolist()))
        raise ConfigurationError(f"classes {missing} have no training examples")


def _schedule(base_lr: float, batch: int, epochs: int, warmup: int, wd: float) -> TrainConfig:
    return TrainConfig(base_lr=base_lr, batch_size=batch, epochs=max(epochs, 1),
                       warmup_epochs=min(warmup, max(epochs - 1, 0)), weight_decay=wd)


# --------------------------------------------------------------------------
# linear probing


@dataclass
class LinearProbe:
    """Feature standardization (statistics from the training set) + linear head."""

    mean: np.ndarray
    std: np.ndarray
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, features: np.ndarray, num_classes: int, seed: int = 0) -> "LinearProbe":
        rng = np.random.default_rng(seed)
        dim = features.shape[1]
        mean = features.mean(axis=0)
        std = features.std(axis=0) + 1e-6
        w = rng.normal(scale=0.01, size=(dim, num_classes))
        return cls(mean, std, Tensor(w, requires_grad=True), Tensor(np.zeros(num_classes), requires_grad=True))

    def logits(self, features: np.ndarray) -> Tensor:
        return T.linear(Tensor((features - self.mean) / self.std), self.weight, self.bias)

    def predict(self, features: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.logits(features).data.argmax(axis=1)


def train_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int,
                base_lr: float = 1e-2, batch_size: int = 256, seed: int = 0) -> LinearProbe:
    features = features.astype(np.float64)
    probe = LinearProbe.init(features, num_classes, seed)
    params = {"head.weight": probe.weight, "head.bias": probe.bias}
    cfg = _schedule(base_lr, batch_size, epochs, warmup=min(5, epochs // 10), wd=0.0)
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, 0.0)
    n = len(features)
    steps = math.ceil(n / batch_size)
    step = 0
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch, 7]).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            for p in params.values():
                p.zero_grad()
            T.softmax_cross_entropy(probe.logits(features[idx]), labels[idx]).backward()
            opt.step(params, lr_at(step, cfg, steps))
            step += 1
    return probe


def linear_probe(model: RandSAC, train: DatasetHandle, test: DatasetHandle, epochs: int,
                 base_lr: float = 1e-2, batch_size: int = 256, seed: int = 0) -> EvalReport:
    """Train a linear classifier on frozen, mean-pooled last-layer features."""
    _check_classes(train)
    before = parameter_checksum(model)
    f_train = model.extract_features(train.images())
    f_test = model.extract_features(test.images())
    probe = train_probe(f_train, train.labels, train.num_classes, epochs, base_lr, batch_size, seed)
    pred = probe.predict(f_test.astype(np.float64))
    if parameter_checksum(model) != before:
        raise RuntimeError("linear probing modified encoder parameters")
    return EvalReport("linear", accuracy(pred, test.labels),
                      per_class_accuracy(pred, test.labels, test.num_classes), seed=seed, epochs=epochs,
                      extra={"encoder_checksum": before})


# --------------------------------------------------------------------------
# fine-tuning


class Classifier:
    """Encoder (no masks, no decoder) + mean pool + LayerNorm + linear head."""

    def __init__(self, model: RandSAC, num_classes: int, seed: int = 0):
        self.model = model
        rng = np.random.default_rng([seed, 11])
        d = model.config.dim
        dt = model.dtype
        self.params = {n: model.params[n] for n in model.encoder_param_names()}
        self.params["fc_norm.weight"] = Tensor(np.ones(d, dt), requires_grad=True)
        self.params["fc_norm.bias"] = Tensor(np.zeros(d, dt), requires_grad=True)
        self.params["cls_head.weight"] = Tensor(rng.normal(scale=0.01, size=(d, num_classes)).astype(dt),
                                                requires_grad=True)
        self.params["cls_head.bias"] = Tensor(np.zeros(num_classes, dt), requires_grad=True)

    def logits(self, images: np.ndarray) -> Tensor:
        p = self.params
        h = T.layer_norm(self.model.pooled(images), p["fc_norm.weight"], p["fc_norm.bias"])
        return T.linear(h, p["cls_head.weight"], p["cls_head.bias"])

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.logits(images[s:s + batch_size]).data.argmax(axis=1))
        return np.concatenate(out)

    def layer_scales(self, decay: float) -> dict[str, float]:
        """Encoder block k (1-based) gets decay**(L - k); patch embedding counts as block 0."""
        L = self.model.config.enc_layers
        scales = {}
        for name in self.params:
            if name.startswith("patch_embed"):
                k = 0
            elif name.startswith("enc."):
                k = int(name.split(".")[1]) + 1
            else:
                k = L
            scales[name] = decay ** (L - k)
        return scales


def _copy_model(model: RandSAC) -> RandSAC:
    clone = model.astype(model.config.dtype)
    return clone


def finetune(model: RandSAC, train: DatasetHandle, test: DatasetHandle, epochs: int,
             base_lr: float = 5e-4, batch_size: int = 128, weight_decay: float = 0.05,
             layer_decay: float = 0.65, warmup_epochs: int = 5, seed: int = 0,
             augment_views: bool = True) -> EvalReport:
    """Supervised end-to-end training of a copy of the encoder; ``model`` is untouched."""
    _check_classes(train)
    clf = Classifier(_copy_model(model), train.num_classes, seed)
    cfg = _schedule(base_lr, batch_size, epochs, warmup_epochs, weight_decay)
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, weight_decay)
    scales = clf.layer_scales(layer_decay)
    images = train.images()
    n = len(images)
    steps = math.ceil(n / batch_size)
    step = 0
    for epoch in range(epochs):
        perm = np.random.default_rng([seed, epoch, 13]).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if augment_views:
                batch = np.stack([augment(sample_rng(seed, epoch, int(i)), images[i]) for i in idx])
            else:
                batch = images[idx]
            for p in clf.params.values():
                p.zero_grad()
            T.softmax_cross_entropy(clf.logits(batch), train.labels[idx]).backward()
            opt.step(clf.params, lr_at(step, cfg, steps), lr_scale=scales,
                     decay=lambda name: not (name.endswith(".bias") or "norm" in name))
            step += 1
    pred = clf.predict(test.images())
    return EvalReport("finetune", accuracy(pred, test.labels),
                      per_class_accuracy(pred, test.labels, test.num_classes), seed=seed, epochs=epochs)
