"""Masked encoder-decoder ViT with trainable encoder-to-decoder skip weights.

The encoder sees patch embeddings plus fixed sine-cosine positions under the
source mask. Every decoder layer gets its own memory, a learned linear mix of
all encoder layer outputs, and decodes from positional queries only, under
the decoder self mask and the memory mask.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DivergenceError
from .masks import memory_mask_from_ranks, source_mask_from_ranks
from .tensor import Tensor
from .tokenizer import grid_shape, normalize_targets, patchify, sincos_positions

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
LOSS_MODES = ("raw", "norm")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    mlp_ratio: int = 4
    patch: int = 4
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    dtype: str = "float32"
    pixel_mean: tuple[float, ...] = CIFAR10_MEAN
    pixel_std: tuple[float, ...] = CIFAR10_STD

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"model.dim {self.dim} not divisible by model.heads {self.heads}")
        if self.dim % 4:
            raise ConfigurationError(f"model.dim {self.dim} must be divisible by 4 for positional tables")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ConfigurationError("model needs at least one encoder and one decoder layer")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"model.dtype must be float32 or float64, got {self.dtype}")
        if len(self.pixel_mean) != self.channels or len(self.pixel_std) != self.channels:
            raise ConfigurationError("pixel_mean/pixel_std need one entry per channel")
        grid_shape(*self.image_size, self.patch)

    @property
    def grid(self) -> tuple[int, int]:
        return grid_shape(*self.image_size, self.patch)

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("image_size", "pixel_mean", "pixel_std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def expected_parameter_count(cfg: ModelConfig) -> int:
    d, p, hid = cfg.dim, cfg.token_dim, cfg.dim * cfg.mlp_ratio
    attn = 4 * (d * d + d)
    mlp = d * hid + hid + hid * d + d
    enc_block = 2 * 2 * d + attn + mlp
    dec_block = 3 * 2 * d + 2 * attn + 2 * d + mlp
    return ((p * d + d) + (d * d + d) + cfg.enc_layers * enc_block + cfg.dec_layers * dec_block
            + 2 * d + (d * p + p) + cfg.dec_layers * cfg.enc_layers)


@dataclass
class EncoderTrace:
    hidden: list[Tensor] = field(default_factory=list)


class RandSAC:
    """Parameters plus forward passes; gradients come from ``tensor``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, hid, p = config.dim, config.dim * config.mlp_ratio, config.token_dim

        self._linear("patch_embed", p, d, rng)
        for i in range(config.enc_layers):
            pre = f"enc.{i}"
            self._norm(f"{pre}.norm1", d)
            self._attention(f"{pre}.attn", d, rng)
            self._norm(f"{pre}.norm2", d)
            self._linear(f"{pre}.mlp.fc1", d, hid, rng)
            self._linear(f"{pre}.mlp.fc2", hid, d, rng)
        self._linear("dec_query", d, d, rng)
        for i in range(config.dec_layers):
            pre = f"dec.{i}"
            self._norm(f"{pre}.norm1", d)
            self._attention(f"{pre}.self_attn", d, rng)
            self._norm(f"{pre}.norm2", d)
            self._norm(f"{pre}.mem_norm", d)
            self._attention(f"{pre}.cross_attn", d, rng)
            self._norm(f"{pre}.norm3", d)
            self._linear(f"{pre}.mlp.fc1", d, hid, rng)
            self._linear(f"{pre}.mlp.fc2", hid, d, rng)
        self._norm("dec_norm", d)
        self._linear("head", d, p, rng)
        skip = np.zeros((config.dec_layers, config.enc_layers))
        skip[:, -1] = 1.0
        self._add("skip.weight", skip)

        gh, gw = config.grid
        self.pos_enc = Tensor(sincos_positions(gh, gw, d).astype(self.dtype))
        self.pixel_mean = np.asarray(config.pixel_mean, dtype=self.dtype)
        self.pixel_std = np.asarray(config.pixel_std, dtype=self.dtype)

    # -- construction helpers

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> None:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self._add(f"{name}.weight", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        self._add(f"{name}.bias", np.zeros(fan_out))

    def _norm(self, name: str, d: int) -> None:
        self._add(f"{name}.weight", np.ones(d))
        self._add(f"{name}.bias", np.zeros(d))

    def _attention(self, name: str, d: int, rng: np.random.Generator) -> None:
        for part in ("q", "k", "v", "out"):
            self._linear(f"{name}.{part}", d, d, rng)

    # -- parameter utilities

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def encoder_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("patch_embed", "enc."))]

    def astype(self, dtype: str) -> "RandSAC":
        """Copy of the model at another precision."""
        clone = RandSAC.__new__(RandSAC)
        clone.config = ModelConfig.from_dict({**self.config.to_dict(), "dtype": dtype})
        clone.dtype = np.dtype(dtype)
        clone.params = {n: Tensor(p.data.astype(dtype), requires_grad=True)
                        for n, p in self.params.items()}
        clone.pos_enc = Tensor(self.pos_enc.data.astype(dtype))
        clone.pixel_mean = self.pixel_mean.astype(dtype)
        clone.pixel_std = self.pixel_std.astype(dtype)
        return clone

    # -- building blocks

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _attn(self, x: Tensor, ctx: Tensor, name: str, mask: np.ndarray | None) -> Tensor:
        h = self.config.heads
        q = T.split_heads(self._lin(x, f"{name}.q"), h)
        k = T.split_heads(self._lin(ctx, f"{name}.k"), h)
        v = T.split_heads(self._lin(ctx, f"{name}.v"), h)
        return self._lin(T.merge_heads(T.masked_attention(q, k, v, mask)), f"{name}.out")

    def _mlp(self, x: Tensor, name: str) -> Tensor:
        return self._lin(T.gelu(self._lin(x, f"{name}.fc1")), f"{name}.fc2")

    # -- forward passes

    def tokens(self, images: np.ndarray) -> np.ndarray:
        """[B, H, W, C] pixels in [0, 1] -> standardized patch tokens."""
        x = (np.asarray(images, dtype=self.dtype) - self.pixel_mean) / self.pixel_std
        return patchify(x, self.config.patch)

    def embed(self, tokens: np.ndarray) -> Tensor:
        n = self.config.num_tokens
        if tokens.shape[1:] != (n, self.config.token_dim):
            raise ConfigurationError(f"expected tokens [B, {n}, {self.config.token_dim}], got {tokens.shape}")
        return T.add(self._lin(Tensor(tokens), "patch_embed"), self.pos_enc)

    def encode(self, x: Tensor, source_mask: np.ndarray | None) -> EncoderTrace:
        trace = EncoderTrace()
        for i in range(self.config.enc_layers):
            pre = f"enc.{i}"
            x = T.add(x, self._self_attn(x, pre, source_mask))
            x = T.add(x, self._mlp(self._ln(x, f"{pre}.norm2"), f"{pre}.mlp"))
            trace.hidden.append(x)
        return trace

    def _self_attn(self, x: Tensor, pre: str, mask: np.ndarray | None) -> Tensor:
        h = self._ln(x, f"{pre}.norm1")
        return self._attn(h, h, f"{pre}.attn", mask)

    def skip_memory(self, trace: EncoderTrace) -> list[Tensor]:
        w = self.params["skip.weight"]
        if len(trace.hidden) != self.config.enc_layers:
            raise ConfigurationError(f"trace has {len(trace.hidden)} layers, expected {self.config.enc_layers}")
        return [T.layer_mix(trace.hidden, w, l) for l in range(self.config.dec_layers)]

    def decode(self, memories: list[Tensor], self_mask: np.ndarray | None,
               memory_mask: np.ndarray | None) -> Tensor:
        batch = memories[0].shape[0]
        y = T.expand(self._lin(self.pos_enc, "dec_query"), batch)
        for i, mem in enumerate(memories):
            pre = f"dec.{i}"
            h = self._ln(y, f"{pre}.norm1")
            y = T.add(y, self._attn(h, h, f"{pre}.self_attn", self_mask))
            y = T.add(y, self._attn(self._ln(y, f"{pre}.norm2"), self._ln(mem, f"{pre}.mem_norm"),
                                    f"{pre}.cross_attn", memory_mask))
            y = T.add(y, self._mlp(self._ln(y, f"{pre}.norm3"), f"{pre}.mlp"))
        return self._lin(self._ln(y, "dec_norm"), "head")

    def predict(self, images: np.ndarray, ranks: np.ndarray) -> Tensor:
        """Patch predictions [B, N, P*P*C] given per-token segment ranks [B, N]."""
        ranks = np.asarray(ranks)
        if ranks.shape != (len(images), self.config.num_tokens):
            raise ConfigurationError(f"ranks {ranks.shape} do not match {len(images)} images "
                                     f"of {self.config.num_tokens} tokens")
        src = source_mask_from_ranks(ranks)
        mem = memory_mask_from_ranks(ranks)
        trace = self.encode(self.embed(self.tokens(images)), src)
        return self.decode(self.skip_memory(trace), src, mem)

    def targets(self, images: np.ndarray, loss_mode: str) -> np.ndarray:
        if loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss mode must be one of {LOSS_MODES}, got {loss_mode!r}")
        tok = self.tokens(images)
        return normalize_targets(tok) if loss_mode == "norm" else tok

    def forward_pretrain(self, images: np.ndarray, ranks: np.ndarray, loss_mode: str = "raw",
                         exclude_first_segment: bool = False) -> Tensor:
        pred = self.predict(images, ranks)
        weights = (np.asarray(ranks) > 0) if exclude_first_segment else None
        loss = T.mse(pred, self.targets(images, loss_mode), weights)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"non-finite pretraining loss {float(loss.data)}")
        return loss

    def pooled(self, images: np.ndarray) -> Tensor:
        """Unmasked encoder, mean over last-layer tokens (graph recorded)."""
        trace = self.encode(self.embed(self.tokens(images)), None)
        return T.mean(trace.hidden[-1], axis=1)

    def extract_features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.pooled(images[start:start + batch_size]).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.dim), self.dtype)
