"""Attention masks realizing autoregressive segment prediction.

All masks are dense boolean [N, N] arrays (rows are queries, columns are
keys, True means attention is permitted). With ``rank(i)`` the position of
token ``i``'s segment in the order:

* source / decoder self: ``rank(j) <= rank(i)``
* memory: ``rank(j) < rank(i)``, except that first-segment rows may see the
  first segment itself.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .segmenter import SegmentMap
from .serializer import SerializationOrder


def token_ranks(segments: SegmentMap, order: SerializationOrder) -> np.ndarray:
    if order.K != segments.K or sorted(order.flat.tolist()) != list(range(segments.K)):
        raise ConfigurationError(
            f"order over {order.K} segments does not match a map with K={segments.K}")
    return order.ranks()[segments.assignment]


def source_mask_from_ranks(ranks: np.ndarray) -> np.ndarray:
    """Works on [N] or batched [B, N] ranks."""
    return ranks[..., None, :] <= ranks[..., :, None]


def memory_mask_from_ranks(ranks: np.ndarray) -> np.ndarray:
    earlier = ranks[..., None, :] < ranks[..., :, None]
    first = ranks == 0
    return earlier | (first[..., :, None] & first[..., None, :])


def build_source_mask(segments: SegmentMap, order: SerializationOrder) -> np.ndarray:
    return source_mask_from_ranks(token_ranks(segments, order))


def build_decoder_self_mask(segments: SegmentMap, order: SerializationOrder) -> np.ndarray:
    return build_source_mask(segments, order)


def build_memory_mask(segments: SegmentMap, order: SerializationOrder) -> np.ndarray:
    return memory_mask_from_ranks(token_ranks(segments, order))


def dump_mask(mask: np.ndarray, path: str | Path) -> None:
    """Plain-text (P1) PBM; permitted cells are written as 1 (black)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in mask]
    Path(path).write_text(f"P1\n{w} {h}\n" + "\n".join(rows) + "\n")


def read_pbm(path: str | Path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P1":
        raise ValueError(f"{path}: not a plain PBM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([t == "1" for t in tokens[3:3 + w * h]]).reshape(h, w)
