"""Float64 gradient check of the whole pretraining objective on a tiny model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .layout import PartitionSpec, sample_layout
from .masks import token_ranks
from .model import ModelConfig, RandSAC

TINY = ModelConfig(dim=16, heads=2, enc_layers=2, dec_layers=1, patch=2, image_size=(8, 8),
                   dtype="float64")


def tiny_problem(seed: int = 0, batch: int = 2, K: int = 2):
    """Model, images and blob-layout ranks for the 4x4-token configuration."""
    rng = np.random.default_rng(seed)
    model = RandSAC(TINY, seed=seed)
    # Break the one-hot init so the skip weights see non-trivial mixing.
    model.params["skip.weight"].data[:] = rng.uniform(0.2, 1.0, size=model.params["skip.weight"].shape)
    for name, p in model.params.items():
        if name.endswith(".bias") or "norm" in name:
            p.data += rng.normal(scale=0.1, size=p.shape)
    images = rng.random((batch, *TINY.image_size, TINY.channels))
    spec = PartitionSpec(kind="blob", order="random", levels=(K,))
    ranks = np.stack([token_ranks(*sample_layout(rng, spec, *TINY.grid)) for _ in range(batch)])
    return model, images, ranks


def full_model_check(seed: int = 0, loss_mode: str = "raw") -> float:
    """Worst relative error over every parameter, skip weights included."""
    model, images, ranks = tiny_problem(seed)
    return T.grad_check(lambda: model.forward_pretrain(images, ranks, loss_mode),
                        list(model.params.values()))
