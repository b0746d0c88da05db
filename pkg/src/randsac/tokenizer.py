"""Images to patch tokens, positional tables and regression targets."""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def grid_shape(height: int, width: int, patch: int) -> tuple[int, int]:
    if patch < 1 or height % patch or width % patch:
        raise ConfigurationError(
            f"patch size {patch} must divide image size {height}x{width}")
    return height // patch, width // patch


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] images -> [B, N, P*P*C] tokens in raster order.

    Each token is its P x P x C pixel block flattened channel-last.
    """
    b, h, w, c = images.shape
    gh, gw = grid_shape(h, w, patch)
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, grid_h: int, grid_w: int, patch: int) -> np.ndarray:
    b, n, d = tokens.shape
    c = d // (patch * patch)
    if n != grid_h * grid_w or c * patch * patch != d:
        raise ConfigurationError(
            f"cannot unpatchify {tokens.shape} onto a {grid_h}x{grid_w} grid with patch {patch}")
    x = tokens.reshape(b, grid_h, grid_w, patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * patch, grid_w * patch, c)


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    angles = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_positions(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table, [N, dim] in raster order.

    The first half of the channels encodes the row, the second half the
    column.
    """
    if dim % 4:
        raise ConfigurationError(f"positional dim {dim} must be divisible by 4")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.concatenate([_sincos_1d(rows.astype(np.float64), dim // 2),
                           _sincos_1d(cols.astype(np.float64), dim // 2)], axis=1)


def token_coordinates(grid_h: int, grid_w: int) -> np.ndarray:
    """Normalized (x, y) per token: top-left (-2, -2), bottom-right (2, 2)."""
    if grid_h < 1 or grid_w < 1:
        raise ConfigurationError(f"grid must be at least 1x1, got {grid_h}x{grid_w}")
    xs = np.linspace(-2.0, 2.0, grid_w) if grid_w > 1 else np.zeros(1)
    ys = np.linspace(-2.0, 2.0, grid_h) if grid_h > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def normalize_targets(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize each token over its own values (population variance)."""
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)
