"""Versioned binary checkpoint container.

Layout (little-endian)::

    magic  b"RANDSAC\\0"          8 bytes
    version                      uint32
    record length, record        uint32, UTF-8 JSON (sorted keys)
    tensor count                 uint32
    per tensor: name length, name, dtype code (b"f4"/b"f8"), ndim (uint32),
                shape (ndim x uint32), raw data

The JSON record holds ``{"model": <ModelConfig>, "meta": {...}}``. Writes go
to a temporary file that is renamed into place, so a crash never leaves a
partial checkpoint behind.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .model import ModelConfig, RandSAC
from .tensor import Tensor

MAGIC = b"RANDSAC\0"
VERSION = 1
_DTYPES = {b"f4": np.dtype("<f4"), b"f8": np.dtype("<f8")}


def atomic_write(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(config: ModelConfig, tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    record = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(record)), record,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = b"f8" if arr.dtype == np.float64 else b"f4"
        arr = arr.astype(_DTYPES[code], copy=False)
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, code, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def decode(payload: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    view = memoryview(payload)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise DataFormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise DataFormatError("not a RandSAC checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ConfigurationError(f"checkpoint format version {version}, expected {VERSION}")
    (rlen,) = struct.unpack("<I", take(4))
    record = json.loads(take(rlen))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        dtype = _DTYPES.get(take(2))
        if dtype is None:
            raise DataFormatError(f"unknown dtype code for tensor {name!r}")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise DataFormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return ModelConfig.from_dict(record["model"]), tensors, record.get("meta", {})


def save(path: str | Path, model: RandSAC, meta: dict | None = None,
         extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {n: p.data for n, p in model.params.items()}
    if extra:
        tensors.update(extra)
    atomic_write(path, encode(model.config, tensors, meta))


def load(path: str | Path, expected: ModelConfig | None = None
         ) -> tuple[RandSAC, dict, dict[str, np.ndarray]]:
    """Returns the model, the meta record and any non-parameter tensors."""
    config, tensors, meta = decode(Path(path).read_bytes())
    if expected is not None and expected != config:
        raise ConfigurationError(f"checkpoint config {config} does not match expected {expected}")
    model = RandSAC(config)
    missing = set(model.params) - set(tensors)
    if missing:
        raise DataFormatError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, p in model.params.items():
        if tensors[name].shape != p.shape:
            raise DataFormatError(f"{name}: stored shape {tensors[name].shape}, model expects {p.shape}")
        model.params[name] = Tensor(tensors.pop(name).astype(model.dtype), requires_grad=True)
    return model, meta, tensors
