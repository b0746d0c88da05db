"""Pretraining: augmentation, per-sample layouts, AdamW, warmup + cosine."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .data import DatasetHandle
from .errors import ConfigurationError, DivergenceError
from .layout import PartitionSpec, sample_layout
from .masks import token_ranks
from .model import LOSS_MODES, RandSAC

METRICS_HEADER = ("step", "epoch", "lr", "loss", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    batch_size: int = 128
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 10
    epochs: int = 100
    seed: int = 0
    loss_mode: str = "raw"
    exclude_first_segment_loss: bool = False
    grad_clip: float = 0.0
    augment: bool = True
    checkpoint_every: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"train.warmup_epochs ({self.warmup_epochs}) must be below train.epochs ({self.epochs})")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"train.loss_mode must be one of {LOSS_MODES}")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to the scaled peak, then cosine decay to 0."""
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    step = min(max(step, 0), total)
    if step < warmup:
        return config.peak_lr * step / warmup
    if total == warmup:
        return config.peak_lr
    progress = (step - warmup) / (total - warmup)
    return 0.5 * config.peak_lr * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Weight decay applies to matrices only; biases, norms and skip weights are exempt."""
    return not (name.endswith(".bias") or "norm" in name or name == "skip.weight")


@dataclass
class AdamW:
    """Adam moments with decoupled weight decay."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict, lr: float, lr_scale: dict[str, float] | None = None,
             decay: Callable[[str], bool] = decays) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name} at step {self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            plr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay and decay(name):
                p.data -= (plr * self.weight_decay) * p.data
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (plr * update).astype(p.data.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{n}": a for n, a in self.m.items()}
        out.update({f"opt.v.{n}": a for n, a in self.v.items()})
        return out


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad *= max_norm / (total + 1e-6)
    return total


# --------------------------------------------------------------------------
# augmentation

CROP_SCALE = (0.2, 1.0)
CROP_RATIO = (3 / 4, 4 / 3)


def sample_crop(rng: np.random.Generator, height: int, width: int,
                scale=CROP_SCALE, ratio=CROP_RATIO) -> tuple[int, int, int, int, float]:
    """Random-resized-crop box ``(top, left, h, w)`` plus the sampled area fraction.

    Falls back to the full image (a centered crop) after 10 rejected draws.
    """
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        frac = rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(frac * area * aspect)))
        h = int(round(math.sqrt(frac * area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w, frac
    return 0, 0, height, width, 1.0


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an [h, w, C] array."""
    h, w = image.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(image.dtype)

    y0, y1, wy = axis(h, height)
    x0, x1, wx = axis(w, width)
    top = image[y0][:, x0] * (1 - wx)[None, :, None] + image[y0][:, x1] * wx[None, :, None]
    bot = image[y1][:, x0] * (1 - wx)[None, :, None] + image[y1][:, x1] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bot * wy[:, None, None]


def augment(rng: np.random.Generator, image: np.ndarray) -> np.ndarray:
    """Random resized crop back to full size, then a coin-flip horizontal flip."""
    h, w = image.shape[:2]
    top, left, ch, cw, _ = sample_crop(rng, h, w)
    out = resize_bilinear(image[top:top + ch, left:left + cw], h, w)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=image.dtype)


# --------------------------------------------------------------------------
# pretraining loop


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sample) so worker scheduling cannot matter."""
    return np.random.default_rng([seed, epoch, index])


def prepare_batch(images: np.ndarray, indices: np.ndarray, epoch: int, config: TrainConfig,
                  spec: PartitionSpec, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    views, ranks, realized = [], [], []
    for idx in indices:
        rng = sample_rng(config.seed, epoch, int(idx))
        img = images[idx]
        views.append(augment(rng, img) if config.augment else img)
        segments, order = sample_layout(rng, spec, *grid)
        ranks.append(token_ranks(segments, order))
        realized.append(segments.K)
    return np.stack(views), np.stack(ranks), realized


@dataclass
class PretrainResult:
    model: RandSAC
    optimizer: AdamW
    metrics: list[tuple]
    mean_realized_K: float
    steps: int


def pretrain(config: TrainConfig, dataset: DatasetHandle, model: RandSAC, spec: PartitionSpec,
             out_dir: str | Path | None = None,
             log: Callable[[str], None] | None = None) -> PretrainResult:
    """Train ``model`` in place; writes ``metrics.csv`` and checkpoints under ``out_dir``."""
    if len(dataset) == 0:
        raise ConfigurationError("pretraining dataset is empty")
    images = dataset.images()
    n = len(images)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = AdamW(config.beta1, config.beta2, config.eps, config.weight_decay)
    grid = model.config.grid
    out = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_file)
        writer.writerow(METRICS_HEADER)
    metrics: list[tuple] = []
    realized_total, realized_count = 0, 0
    step = 0
    try:
        for epoch in range(config.epochs):
            perm = np.random.default_rng([config.seed, epoch]).permutation(n)
            for start in range(0, n, config.batch_size):
                t0 = time.perf_counter()
                idx = perm[start:start + config.batch_size]
                batch, ranks, realized = prepare_batch(images, idx, epoch, config, spec, grid)
                realized_total += sum(realized)
                realized_count += len(realized)
                lr = lr_at(step, config, steps_per_epoch)
                model.zero_grad()
                try:
                    loss = model.forward_pretrain(batch, ranks, config.loss_mode,
                                                  config.exclude_first_segment_loss)
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} (epoch {epoch}, step {step}, lr {lr:.3g})") from exc
                loss.backward()
                if config.grad_clip > 0:
                    clip_grad_norm(model.params, config.grad_clip)
                opt.step(model.params, lr)
                step += 1
                wall = 0 if config.deterministic else int((time.perf_counter() - t0) * 1000)
                row = (step, epoch, f"{lr:.8g}", f"{float(loss.data):.8g}", wall)
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row)
            if metrics_file is not None:
                metrics_file.flush()
            if log is not None:
                log(f"epoch {epoch + 1}/{config.epochs} loss {metrics[-1][3]} lr {metrics[-1][2]}")
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                checkpoint.save(out / "checkpoints" / "last.ckpt", model,
                                meta={"epoch": epoch + 1, "step": step})
    finally:
        if metrics_file is not None:
            metrics_file.close()
    mean_k = realized_total / max(realized_count, 1)
    if out is not None:
        checkpoint.save(out / "checkpoints" / "final.ckpt", model,
                        meta={"epoch": config.epochs, "step": step, "mean_realized_K": mean_k,
                              "optimizer_step": opt.step_count},
                        extra=opt.state_tensors())
    return PretrainResult(model, opt, metrics, mean_k, step)
