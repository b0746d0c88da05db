"""Dataset ingestion: CIFAR binary batches and class-per-folder image trees."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError

CIFAR_PIXELS = 3072
CIFAR_SPLITS = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
CIFAR_RECORDS = {("cifar10", "train"): 10000, ("cifar10", "test"): 10000,
                 ("cifar100", "train"): 50000, ("cifar100", "test"): 10000}
CIFAR_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
CIFAR_CLASSES = {"cifar10": 10, "cifar100": 100}
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


@dataclass
class DatasetHandle:
    """Images kept as uint8 [n, H, W, C]; ``images()`` scales to [0, 1]."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DataFormatError(f"expected [n, H, W, C] pixels, got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise DataFormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def images(self, indices=None) -> np.ndarray:
        px = self.pixels if indices is None else self.pixels[indices]
        return px.astype(np.float32) / np.float32(255.0)

    def subset(self, count: int | None = None, indices=None) -> "DatasetHandle":
        """First ``count`` images, or the given indices."""
        if indices is None:
            indices = np.arange(min(count, len(self)) if count else len(self))
        return DatasetHandle(self.pixels[indices], self.labels[indices], self.num_classes, self.source)


def _decode_records(raw: bytes, variant: str, name: str, expected_records: int | None):
    label_bytes = CIFAR_LABEL_BYTES[variant]
    record = label_bytes + CIFAR_PIXELS
    if expected_records is not None and len(raw) != expected_records * record:
        raise DataFormatError(f"{name}: expected {expected_records * record} bytes "
                              f"({expected_records} records of {record}), found {len(raw)}")
    if len(raw) % record:
        raise DataFormatError(f"{name}: {len(raw)} bytes is not a whole number of {record}-byte records")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    pixels = rows[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels


def load_cifar(path: str | Path, variant: str = "cifar10", split: str = "train",
               strict_counts: bool = True) -> DatasetHandle:
    """Parse the CIFAR binary distribution.

    Records are 1 (CIFAR-10) or 2 (CIFAR-100: coarse, fine) label bytes
    followed by 3072 channel-planar pixel bytes. CIFAR-100 yields fine labels.
    Every file is validated before any data is returned.
    """
    if variant not in CIFAR_SPLITS:
        raise ConfigurationError(f"unknown CIFAR variant {variant!r}")
    if split not in ("train", "test"):
        raise ConfigurationError(f"unknown split {split!r}")
    root = Path(path)
    files = [root / f for f in CIFAR_SPLITS[variant][split]]
    for f in files:
        if not f.is_file():
            raise DataFormatError(f"missing CIFAR file {f}")
    expected = CIFAR_RECORDS[(variant, split)] if strict_counts else None
    parts = [_decode_records(f.read_bytes(), variant, str(f), expected) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    return DatasetHandle(pixels, labels, CIFAR_CLASSES[variant], f"{variant}:{split}")


def encode_cifar_record(image: np.ndarray, labels: tuple[int, ...]) -> bytes:
    """Inverse of the record decoder: label byte(s) then R, G, B planes."""
    planar = np.asarray(image, dtype=np.uint8).transpose(2, 0, 1).reshape(-1)
    return bytes(labels) + planar.tobytes()


def load_image_dir(path: str | Path) -> DatasetHandle:
    """One subdirectory per class (sorted names give label ids); files sorted by path."""
    from PIL import Image

    root = Path(path)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise DataFormatError(f"{root}: no class subdirectories")
    pixels, labels, shape = [], [], None
    for label, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.uint8)
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise DataFormatError(f"{f}: dims {arr.shape} differ from {shape}")
            pixels.append(arr)
            labels.append(label)
    if not pixels:
        raise DataFormatError(f"{root}: no images found")
    return DatasetHandle(np.stack(pixels), np.asarray(labels, dtype=np.int64), len(classes), f"dir:{root}")
