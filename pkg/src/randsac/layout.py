"""Per-sample partition and order sampling from a declarative spec."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .segmenter import (SegmentMap, per_token_partition, sample_blob_partition,
                        shuffle_coherence, square_partition)
from .serializer import SerializationOrder, hierarchical_order, random_flat_order, raster_order
from .tokenizer import token_coordinates

KINDS = ("patch", "square", "blob")
ORDERS = ("raster", "random")


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "blob"
    order: str = "random"
    square_size: int = 2
    levels: tuple[int, ...] = (11, 5)
    shuffle: bool = False
    strict: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"partition.kind must be one of {KINDS}, got {self.kind!r}")
        if self.order not in ORDERS:
            raise ConfigurationError(f"partition.order must be one of {ORDERS}, got {self.order!r}")
        if self.kind == "blob" and (not self.levels or self.levels[0] < 2):
            raise ConfigurationError(f"partition.levels needs a first count >= 2, got {self.levels}")

    @property
    def requested_K(self) -> int | None:
        """Segment count asked for; None when it follows from the grid."""
        return self.levels[0] if self.kind == "blob" else None


def sample_layout(rng: np.random.Generator | None, spec: PartitionSpec, grid_h: int,
                  grid_w: int) -> tuple[SegmentMap, SerializationOrder]:
    """Draw one training-time segment map and its prediction order.

    ``rng`` may be None only for fully deterministic specs (raster order over
    fixed partitions without shuffling).
    """
    n = grid_h * grid_w
    coords = token_coordinates(grid_h, grid_w)
    if spec.kind == "patch":
        segments = per_token_partition(n)
    elif spec.kind == "square":
        segments = square_partition(grid_h, grid_w, spec.square_size)
    else:
        segments = sample_blob_partition(rng, coords, spec.levels[0], spec.strict)
    if spec.shuffle:
        segments = shuffle_coherence(rng, segments)
    if spec.order == "raster":
        order = raster_order(segments)
    elif spec.kind == "blob" and len(spec.levels) > 1:
        order = hierarchical_order(rng, segments, coords, spec.levels)
    else:
        order = random_flat_order(rng, segments.K)
    return segments, order
