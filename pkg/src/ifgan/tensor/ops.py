"""Differentiable primitives: elementwise maps, matmul, shape ops, reductions."""

from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np

from .core import Tensor, as_tensor, make_output

UNARY_KINDS = ("neg", "abs", "tanh", "sigmoid", "relu", "leaky_relu")
BINARY_KINDS = ("add", "sub", "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape).astype(t.dtype)


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None, slope: float = 0.2) -> Tensor:
    """Apply an elementwise op.  Binary kinds take ``b`` of a's shape or a scalar."""
    a = as_tensor(a)
    if kind in BINARY_KINDS:
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        b = as_tensor(b, like=a)
        _check_binary(a, b)
        if kind == "add":
            out = a.data + b.data
            back = lambda g: (g, _reduce_to(g, b))
        elif kind == "sub":
            out = a.data - b.data
            back = lambda g: (g, _reduce_to(-g, b))
        else:
            ad, bd = a.data, b.data
            out = ad * bd
            back = lambda g: (g * bd, _reduce_to(g * ad, b))
        return make_output(kind, np.asarray(out, dtype=a.dtype), (a, b), back)

    if kind not in UNARY_KINDS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    x = a.data
    if kind == "neg":
        out = -x
        back = lambda g: (-g,)
    elif kind == "abs":
        out = np.abs(x)
        back = lambda g: (g * np.sign(x),)  # sign(0) = 0: subgradient 0 at the kink
    elif kind == "tanh":
        out = np.tanh(x)
        back = lambda g: (g * (1.0 - out * out),)
    elif kind == "sigmoid":
        out = _sigmoid(x)
        back = lambda g: (g * out * (1.0 - out),)
    elif kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0).astype(x.dtype)
        back = lambda g: (g * mask,)
    else:
        mask = x > 0
        scale = np.where(mask, 1.0, slope).astype(x.dtype)
        out = x * scale
        back = lambda g: (g * scale,)
    return make_output(kind, out, (a,), back)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def neg(a):
    return elementwise("neg", a)


def abs(a):
    return elementwise("abs", a)


def tanh(a):
    return elementwise("tanh", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def relu(a):
    return elementwise("relu", a)


def leaky_relu(a, slope: float = 0.2):
    return elementwise("leaky_relu", a, slope=slope)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_output("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (broadcast over the rest)."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ValueError(f"bias of shape {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return make_output("bias_add", x.data + bias.data.reshape(view), (x, bias),
                       lambda g: (g, g.sum(axis=others)))


# -- shape ops ---------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat rank mismatch: {ref} vs {t.shape}")
        for ax, (p, q) in enumerate(zip(ref, t.shape)):
            if ax != axis and p != q:
                raise ValueError(f"concat extent mismatch on axis {ax}: {ref} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [builtins.slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = builtins.slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return make_output("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def slice(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return make_output("slice", np.array(x.data[index]), (x,), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ValueError(f"cannot reshape {x.shape} to {shape}") from err
    src = x.shape
    return make_output("reshape", out, (x,), lambda g: (g.reshape(src),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest expects [B,C,H,W], got {x.shape}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    B, C, H, W = x.shape

    def back(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_output("upsample_nearest", out, (x,), back)


def avgpool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling over the two trailing axes."""
    if x.ndim != 4:
        raise ValueError(f"avgpool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % k or W % k:
        bad = 2 if H % k else 3
        raise ValueError(f"avgpool window {k} does not divide axis {bad} of {x.shape}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (g / (k * k),)

    return make_output("avgpool", out, (x,), back)


def pad_zero(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes by ``pad`` on each side."""
    if pad < 0:
        raise ValueError(f"negative padding {pad}")
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(x.data, widths)

    def back(g):
        return (g[..., pad:-pad, pad:-pad],)

    return make_output("pad_zero", out, (x,), back)


def _norm_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise ValueError(f"axis {a} out of range for shape {x.shape}")
        out.append(a % x.ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(x, axes)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.sum(axis=axes)
    return make_output("sum", np.asarray(out, dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(np.reshape(g, kept), shape).copy(),))


def mean(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(x, axes)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = x.data.mean(axis=axes)
    return make_output("mean", np.asarray(out, dtype=x.dtype), (x,),
                       lambda g: (np.broadcast_to(np.reshape(g, kept) / count, shape).copy(),))


def flip_horizontal(x: Tensor) -> Tensor:
    return make_output("flip", x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1].copy(),))


# -- fused, numerically stable loss primitives ----------------------------


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a constant target."""
    x = logits.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite logits passed to bce_with_logits")
    # max(x,0) - x*t + log(1 + exp(-|x|))
    per = np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    out = np.asarray(per.mean(), dtype=x.dtype)

    def back(g):
        return ((_sigmoid(x) - target) * (g / n),)

    return make_output("bce_with_logits", out, (logits,), back)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of [B,K] logits against integer labels."""
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy expects [B,K] logits, got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = z.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}), got {labels.tolist()}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits passed to cross_entropy")
    logp = log_softmax_np(z)
    out = np.asarray(-logp[np.arange(B), labels].mean(), dtype=z.dtype)

    def back(g):
        d = np.exp(logp)
        d[np.arange(B), labels] -= 1.0
        return (d * (g / B),)

    return make_output("cross_entropy", out, (logits,), back)
