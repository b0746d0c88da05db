"""Minimal dense tensors with reverse-mode differentiation.

Only the primitives the RandSAC model needs are provided, and each one is a
fused node with a handwritten backward rule, which keeps the Python overhead
per training step small. Broadcasting is limited to leading batch axes.

Precision follows the input arrays: training runs in float32, gradient
checks run the same graph in float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

MASK_FILL = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over leading axes that were broadcast."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape[len(a.shape) - len(b.shape):] != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ beyond leading batch axes")


# --------------------------------------------------------------------------
# elementwise and structural


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b`` where ``b`` may omit leading batch axes of ``a``."""
    if len(b.shape) > len(a.shape):
        a, b = b, a
    _check_suffix(a, b, "add")
    sb = b.shape
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, _sum_to(g, sb)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.dtype.type(c), (a,), "scale", lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose",
                 lambda g: (g.transpose(inv),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, N, D] -> [B, H, N, D/H]."""
    b, n, d = x.shape
    if d % heads:
        raise DimensionError(f"split_heads: width {d} not divisible by {heads} heads")
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, N, d] -> [B, N, H*d]."""
    b, h, n, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def expand(x: Tensor, batch: int) -> Tensor:
    """Repeat ``x`` along a new leading batch axis."""
    data = np.broadcast_to(x.data, (batch, *x.shape)).copy()
    return _make(data, (x,), "expand", lambda g: (g.sum(axis=0),))


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), "mean", backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(math.sqrt(2.0 / math.pi))
    a = xd.dtype.type(0.044715)
    half = xd.dtype.type(0.5)
    x2 = xd * xd
    t = x2 * a
    t += 1
    t *= xd
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= xd
    out *= half

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        d = x2 * (3 * a)
        d += 1
        d *= c
        d *= xd
        d *= 1 - t * t
        d += 1 + t
        d *= half
        d *= g
        return (d,)

    return _make(out, (x,), "gelu", backward)


# --------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight + bias``."""
    if x.shape[-1] != weight.shape[0] or weight.data.ndim != 2:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        dw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _make(out.reshape(*lead, weight.shape[1]), parents, "linear", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ContractViolation("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gh = g * gamma.data
        dx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), "layer_norm", backward)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention over [B, H, N, d] inputs.

    ``mask`` is boolean, shaped [N, N] or [B, N, N] (rows are queries, True
    means permitted); ``None`` means unmasked. Forbidden cells receive an
    additive -1e9 before the softmax.
    """
    if q.shape[:2] != k.shape[:2] or k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"masked_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    dt = q.dtype
    sc = dt.type(1.0 / math.sqrt(q.shape[-1]))
    logits = q.data @ np.swapaxes(k.data, -1, -2)
    logits *= sc
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (q.shape[2], k.shape[2]):
            raise DimensionError(f"masked_attention: mask {mask.shape} for q {q.shape}, k {k.shape}")
        if not mask.any(axis=-1).all():
            raise ContractViolation("masked_attention: mask has a row with no permitted column")
        additive = np.where(mask, dt.type(0), dt.type(MASK_FILL))
        logits += additive[:, None] if mask.ndim == 3 else additive
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits, out=logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= sc
        dq = ds @ k.data
        dk = np.swapaxes(ds, -1, -2) @ q.data
        return dq, dk, dv

    return _make(out, (q, k, v), "masked_attention", backward)


def layer_mix(hs: Sequence[Tensor], weights: Tensor, row: int) -> Tensor:
    """``sum_k weights[row, k] * hs[k]``."""
    if weights.shape[1] != len(hs):
        raise DimensionError(f"layer_mix: {len(hs)} inputs but weights {weights.shape}")
    w = weights.data[row]
    out = w[0] * hs[0].data
    for wk, h in zip(w[1:], hs[1:]):
        out = out + wk * h.data

    def backward(g):
        dw = np.zeros_like(weights.data)
        dw[row] = [np.vdot(h.data, g) for h in hs]
        return (dw, *[wk * g for wk in w])

    return _make(out, (weights, *hs), "layer_mix", backward)


# --------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: np.ndarray | Tensor, token_weights: np.ndarray | None = None) -> Tensor:
    """Mean squared error.

    With ``token_weights`` (shape = ``pred.shape[:-1]``) the mean runs over
    the weighted tokens only.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    if token_weights is None:
        denom = diff.size
        w = None
    else:
        w = np.asarray(token_weights, dtype=pred.dtype)[..., None]
        denom = w.sum() * diff.shape[-1]
        if denom == 0:
            raise ContractViolation("mse: token weights select no tokens")
        diff = diff * w
    val = np.asarray((diff * diff).sum() / denom, dtype=pred.dtype)

    def backward(g):
        d = 2.0 * g * diff / denom
        if w is not None:
            d = d * w
        return (d.astype(pred.dtype, copy=False),)

    return _make(val, (pred,), "mse", backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(labels)
    idx = np.arange(n)
    val = np.asarray(-logp[idx, labels].mean(), dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[idx, labels] -= 1.0
        return (d * (g / n),)

    return _make(val, (logits,), "cross_entropy", backward)


# --------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``param.data``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               floor: float = 1e-5) -> float:
    """Worst relative error between backward and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    vanishing gradients from dividing by zero.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractViolation("grad_check requires float64 parameters")
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ContractViolation(f"grad_check: objective must be scalar, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = numerical_grad(f, p, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    return worst
