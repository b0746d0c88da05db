"""Token-grid partitions: square blocks, Gaussian blobs, shuffled fibers."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MEAN_RANGE = (-1.75, 1.75)
STD_RANGE = (0.5, 1.0)
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class SegmentMap:
    """Segment id per token (raster order); ids are compact in ``[0, K)``."""

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if a.ndim != 1 or a.size == 0:
            raise ConfigurationError("segment assignment must be a non-empty 1-D array")
        counts = np.bincount(a) if a.min() >= 0 else np.array([0])
        if a.min() < 0 or (counts == 0).any():
            raise ConfigurationError("segment ids must cover [0, K) with no empty segment")

    @property
    def K(self) -> int:
        return int(self.assignment.max()) + 1

    @property
    def num_tokens(self) -> int:
        return int(self.assignment.size)

    @property
    def trainable(self) -> bool:
        return self.K >= 2

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def members(self, segment: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == segment)


@dataclass(frozen=True)
class BlobParams:
    means: np.ndarray  # [K, 2] as (x, y)
    stds: np.ndarray  # [K, 2]

    @property
    def K(self) -> int:
        return int(self.means.shape[0])


def per_token_partition(num_tokens: int) -> SegmentMap:
    return SegmentMap(np.arange(num_tokens))


def square_partition(grid_h: int, grid_w: int, M: int) -> SegmentMap:
    """Contiguous M x M blocks, numbered row-major over blocks."""
    if M < 1 or grid_h % M or grid_w % M:
        raise ConfigurationError(
            f"square size {M} must divide the {grid_h}x{grid_w} token grid "
            "(a 13x13 grid, for instance, admits no square segments)")
    if (grid_h // M) * (grid_w // M) < 2:
        raise ConfigurationError(
            f"square size {M} on a {grid_h}x{grid_w} grid leaves a single segment; nothing to predict")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return SegmentMap((rows // M) * (grid_w // M) + cols // M)


def sample_blob_params(rng: np.random.Generator, K: int) -> BlobParams:
    if K < 1:
        raise ConfigurationError(f"blob count must be positive, got {K}")
    means = rng.uniform(*MEAN_RANGE, size=(K, 2))
    stds = rng.uniform(*STD_RANGE, size=(K, 2))
    return BlobParams(means, stds)


def blob_density(params: BlobParams, coords: np.ndarray) -> np.ndarray:
    """[num_points, K] diagonal-Gaussian densities, normalization included."""
    z = (coords[:, None, :] - params.means[None]) / params.stds[None]
    norm = 1.0 / (2.0 * np.pi * params.stds[:, 0] * params.stds[:, 1])
    return norm[None] * np.exp(-0.5 * (z * z).sum(axis=-1))


def _compact(labels: np.ndarray) -> np.ndarray:
    _, inverse = np.unique(labels, return_inverse=True)
    return inverse.reshape(-1)


def assign_tokens(params: BlobParams, coords: np.ndarray) -> SegmentMap:
    """Each token goes to its highest-density blob; empty blobs are dropped.

    ``np.argmax`` returns the first maximum, so ties resolve to the lowest
    component index. A returned map with ``K < 2`` is not usable for
    pretraining and should be resampled by the caller.
    """
    return SegmentMap(_compact(np.argmax(blob_density(params, coords), axis=1)))


def sample_blob_partition(rng: np.random.Generator, coords: np.ndarray, K: int,
                          strict: bool = False) -> SegmentMap:
    """Sample blobs until at least two segments are realized.

    In strict mode a partition is also resampled when any blob ends up empty.
    """
    need = min(K, len(coords)) if strict else 2
    for _ in range(MAX_RESAMPLES):
        seg = assign_tokens(sample_blob_params(rng, K), coords)
        if seg.K >= need and seg.K >= 2:
            return seg
    raise ConfigurationError(
        f"could not realize {need} blob segments out of K={K} on {len(coords)} tokens "
        f"after {MAX_RESAMPLES} attempts")


def shuffle_coherence(rng: np.random.Generator, segments: SegmentMap) -> SegmentMap:
    """Permute token positions so segments keep their sizes but lose locality."""
    perm = rng.permutation(segments.num_tokens)
    return SegmentMap(segments.assignment[perm])


def is_contiguous(tokens: np.ndarray, grid_h: int, grid_w: int) -> bool:
    """4-connectivity of a token set on the grid."""
    members = set(int(t) for t in tokens)
    if not members:
        return False
    start = next(iter(members))
    seen = {start}
    stack = [start]
    while stack:
        t = stack.pop()
        r, c = divmod(t, grid_w)
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            u = rr * grid_w + cc
            if 0 <= rr < grid_h and 0 <= cc < grid_w and u in members and u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == len(members)


def _palette(k: int) -> tuple[int, int, int]:
    hue = (k * 0.618033988749895) % 1.0
    sector = int(hue * 6)
    f = hue * 6 - sector
    v, s = 230, 0.75
    p, q, t = int(v * (1 - s)), int(v * (1 - s * f)), int(v * (1 - s * (1 - f)))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][sector % 6]


def dump_segment_map(segments: SegmentMap, grid_h: int, grid_w: int, path: str | Path,
                     cell: int = 8) -> None:
    """Write a plain-text (P3) PPM with one colored cell per token."""
    colors = np.array([_palette(k) for k in range(segments.K)], dtype=np.int64)
    img = colors[segments.assignment].reshape(grid_h, grid_w, 3)
    img = img.repeat(cell, axis=0).repeat(cell, axis=1)
    h, w, _ = img.shape
    lines = [f"P3\n{w} {h}\n255"]
    lines += [" ".join(str(int(v)) for v in row.ravel()) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")
