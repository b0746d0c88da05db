"""Plain numpy forward pass of the masked encoder-decoder, written without the
autodiff kernel, used as an independent oracle.

The decoder memory is the last encoder layer's output, i.e. the vanilla
masked transformer that one-hot skip weights are supposed to reproduce.
"""
import numpy as np

from randsac.masks import memory_mask_from_ranks, source_mask_from_ranks
from randsac.tokenizer import patchify


def _ln(x, w, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _attn(p, name, x, ctx, mask, heads):
    b, n, d = x.shape
    hd = d // heads

    def proj(t, part):
        y = t @ p[f"{name}.{part}.weight"] + p[f"{name}.{part}.bias"]
        return y.reshape(b, -1, heads, hd).transpose(0, 2, 1, 3)

    q, k, v = proj(x, "q"), proj(ctx, "k"), proj(ctx, "v")
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
    if mask is not None:
        m = mask if mask.ndim == 3 else mask[None]
        logits = np.where(m[:, None], logits, -np.inf)
    logits = logits - logits.max(-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(-1, keepdims=True)
    out = (w @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return out @ p[f"{name}.out.weight"] + p[f"{name}.out.bias"]


def _mlp(p, name, x):
    h = _gelu(x @ p[f"{name}.fc1.weight"] + p[f"{name}.fc1.bias"])
    return h @ p[f"{name}.fc2.weight"] + p[f"{name}.fc2.bias"]


def reference_predict(model, images, ranks):
    cfg = model.config
    p = {n: t.data for n, t in model.params.items()}
    x = (np.asarray(images, dtype=model.dtype) - model.pixel_mean) / model.pixel_std
    tok = patchify(x, cfg.patch)
    src = source_mask_from_ranks(ranks)
    mem_mask = memory_mask_from_ranks(ranks)
    pos = model.pos_enc.data
    h = tok @ p["patch_embed.weight"] + p["patch_embed.bias"] + pos
    for i in range(cfg.enc_layers):
        a = _ln(h, p[f"enc.{i}.norm1.weight"], p[f"enc.{i}.norm1.bias"])
        h = h + _attn(p, f"enc.{i}.attn", a, a, src, cfg.heads)
        h = h + _mlp(p, f"enc.{i}.mlp", _ln(h, p[f"enc.{i}.norm2.weight"], p[f"enc.{i}.norm2.bias"]))
    memory = h
    y = np.broadcast_to(pos @ p["dec_query.weight"] + p["dec_query.bias"], (len(images),) + pos.shape[:1]
                        + (cfg.dim,))
    for i in range(cfg.dec_layers):
        pre = f"dec.{i}"
        a = _ln(y, p[f"{pre}.norm1.weight"], p[f"{pre}.norm1.bias"])
        y = y + _attn(p, f"{pre}.self_attn", a, a, src, cfg.heads)
        m = _ln(memory, p[f"{pre}.mem_norm.weight"], p[f"{pre}.mem_norm.bias"])
        y = y + _attn(p, f"{pre}.cross_attn", _ln(y, p[f"{pre}.norm2.weight"], p[f"{pre}.norm2.bias"]),
                      m, mem_mask, cfg.heads)
        y = y + _mlp(p, f"{pre}.mlp", _ln(y, p[f"{pre}.norm3.weight"], p[f"{pre}.norm3.bias"]))
    y = _ln(y, p["dec_norm.weight"], p["dec_norm.bias"])
    return y @ p["head.weight"] + p["head.bias"]
