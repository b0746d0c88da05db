"""Segment prediction orders: raster, flat random and hierarchical random."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .segmenter import MAX_RESAMPLES, SegmentMap, assign_tokens, sample_blob_params


@dataclass(frozen=True)
class SerializationOrder:
    """Segments in prediction order.

    ``groups`` lists the top-level partitions in traversal order, each as the
    ordered segment ids it contains. ``partitions`` holds one array per
    coarser level mapping segment id to partition id (empty for flat orders).
    """

    groups: tuple[tuple[int, ...], ...]
    partitions: tuple[np.ndarray, ...] = field(default=())

    @property
    def flat(self) -> np.ndarray:
        return np.fromiter((s for g in self.groups for s in g), dtype=np.int64)

    @property
    def K(self) -> int:
        return sum(len(g) for g in self.groups)

    def ranks(self) -> np.ndarray:
        """Position of each segment id in the flattened order."""
        flat = self.flat
        r = np.empty_like(flat)
        r[flat] = np.arange(flat.size)
        return r


def _flat(perm: Sequence[int]) -> SerializationOrder:
    return SerializationOrder(tuple((int(s),) for s in perm))


def raster_order(segments: SegmentMap) -> SerializationOrder:
    """Segments sorted by the raster index of their first token."""
    first = np.full(segments.K, segments.num_tokens, dtype=np.int64)
    np.minimum.at(first, segments.assignment, np.arange(segments.num_tokens))
    return _flat(np.argsort(first, kind="stable"))


def random_flat_order(rng: np.random.Generator, K: int) -> SerializationOrder:
    if K < 1:
        raise ConfigurationError(f"cannot order {K} segments")
    return _flat(rng.permutation(K))


def segment_centroids(segments: SegmentMap, coords: np.ndarray) -> np.ndarray:
    sums = np.zeros((segments.K, 2))
    np.add.at(sums, segments.assignment, coords)
    return sums / segments.sizes()[:, None]


def _group_units(rng: np.random.Generator, centroids: np.ndarray, count: int) -> np.ndarray:
    """Blob-assign unit centroids to ``count`` groups; at least two realized."""
    if len(centroids) < 2:
        return np.zeros(len(centroids), dtype=np.int64)
    for _ in range(MAX_RESAMPLES):
        grouping = assign_tokens(sample_blob_params(rng, count), centroids)
        if grouping.K >= 2 or count < 2:
            return grouping.assignment
    raise ConfigurationError(
        f"could not split {len(centroids)} units into >=2 of {count} partitions "
        f"after {MAX_RESAMPLES} attempts")


def hierarchical_order(rng: np.random.Generator, segments: SegmentMap, coords: np.ndarray,
                       level_K: Sequence[int]) -> SerializationOrder:
    """Random traversal of a random hierarchy built on top of ``segments``.

    ``level_K[0]`` is the requested segment count; each later entry is the
    number of blobs used to group the previous level's units, located at
    the mean coordinate of their tokens. Traversal picks a random order of
    top-level partitions and recursively a random order inside each.
    """
    level_K = tuple(int(k) for k in level_K)
    if any(b >= a for a, b in zip(level_K, level_K[1:])):
        raise ConfigurationError(f"hierarchy levels must be strictly decreasing, got {level_K}")
    if len(level_K) <= 1:
        return random_flat_order(rng, segments.K)

    # unit_of[level][segment] = id of the segment's ancestor at that level
    unit_of = [np.arange(segments.K)]
    token_units = segments
    for count in level_K[1:]:
        cents = segment_centroids(token_units, coords)
        grouping = _group_units(rng, cents, count)
        unit_of.append(grouping[unit_of[-1]])
        token_units = SegmentMap(grouping[token_units.assignment])

    def visit(level: int, members: np.ndarray) -> list[list[int]]:
        if level == 0:
            return [[int(s)] for s in rng.permutation(members)]
        units = np.unique(unit_of[level][members])
        out = []
        for u in rng.permutation(units):
            sub = members[unit_of[level][members] == u]
            out.append([s for part in visit(level - 1, sub) for s in part])
        return out

    top = len(unit_of) - 1
    groups = tuple(tuple(g) for g in visit(top, np.arange(segments.K)))
    return SerializationOrder(groups, tuple(unit_of[1:]))


def dump_order(order: SerializationOrder, path: str | Path | None = None) -> str:
    lines = [f"groups: {len(order.groups)}"]
    for i, g in enumerate(order.groups):
        lines.append(f"  partition {i}: {' '.join(str(s) for s in g)}")
    lines.append("flat: " + " ".join(str(s) for s in order.flat))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
