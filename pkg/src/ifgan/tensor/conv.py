"""Convolution, transposed convolution and feature normalization.

Convolutions use the cross-correlation convention (no kernel flip) and are
computed by im2col + a single matrix product.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, make_output


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [B,Ho,Wo,C,kh,kw] (contiguous)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    """Scatter-add [B,Ho,Wo,C,kh,kw] patches back into a [B,C,H,W] image."""
    B, C, H, W = x_shape
    _, Ho, Wo, _, kh, kw = cols.shape
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # B,C,kh,kw,Ho,Wo
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + H, pad:pad + W]
    return out


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    B = x.shape[0]
    Cout, Cin, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    Ho, Wo = cols.shape[1:3]
    out = cols.reshape(B * Ho * Wo, Cin * kh * kw) @ w.reshape(Cout, -1).T
    return np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))


def conv_grad_input(dout: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    B, Cout, Ho, Wo = dout.shape
    _, Cin, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
    dcols = (d2 @ w.reshape(Cout, -1)).reshape(B, Ho, Wo, Cin, kh, kw)
    return _col2im(dcols, x_shape, stride, pad)


def conv_grad_weight(x: np.ndarray, dout: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    Cout, Cin, kh, kw = w_shape
    B, _, Ho, Wo = dout.shape
    cols = _im2col(x, kh, kw, stride, pad)[:, :Ho, :Wo]
    d2 = dout.transpose(1, 0, 2, 3).reshape(Cout, -1)
    return (d2 @ cols.reshape(B * Ho * Wo, -1)).reshape(w_shape)


def _check_conv_args(x: Tensor, w: Tensor, stride: int, pad: int, in_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] input and 4-D kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"padding must be non-negative, got {pad}")
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, kernel expects {w.shape[in_axis]}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of x [B,Cin,H,W] with w [Cout,Cin,kh,kw]."""
    _check_conv_args(x, w, stride, pad, in_axis=1)
    kh, kw = w.shape[2:]
    H, W = x.shape[2:]
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    xd, wd = x.data, w.data
    out = conv_forward(xd, wd, stride, pad)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {w.shape[0]} output channels")
        out += bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = conv_grad_input(g, wd, xd.shape, stride, pad) if x.requires_grad else None
        gw = conv_grad_weight(xd, g, wd.shape, stride, pad) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_output("conv2d", out, inputs, back)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` w.r.t. its input.

    ``w`` has layout [Cin, Cout, kh, kw]; the output extent is
    ``(H - 1) * stride - 2 * pad + kh``.
    """
    _check_conv_args(x, w, stride, pad, in_axis=0)
    B, _, H, W = x.shape
    Cout, kh, kw = w.shape[1:]
    Ho = (H - 1) * stride - 2 * pad + kh
    Wo = (W - 1) * stride - 2 * pad + kw
    if Ho < 1 or Wo < 1:
        raise ValueError(f"transposed convolution output would be empty ({Ho}x{Wo})")
    xd, wd = x.data, w.data
    out_shape = (B, Cout, Ho, Wo)
    out = conv_grad_input(xd, wd, out_shape, stride, pad)
    if bias is not None:
        if bias.shape != (Cout,):
            raise ValueError(f"bias shape {bias.shape} does not match {Cout} output channels")
        out += bias.data.reshape(1, -1, 1, 1)

    def back(g):
        gx = conv_forward(g, wd, stride, pad) if x.requires_grad else None
        gw = conv_grad_weight(g, xd, wd.shape, stride, pad) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return make_output("conv_transpose2d", out, inputs, back)


class RunningStats:
    """Tracked per-channel mean/variance for batch-mode normalization."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var_unbiased: np.ndarray) -> None:
        m = self.momentum
        self.mean *= 1.0 - m
        self.mean += m * mean
        self.var *= 1.0 - m
        self.var += m * var_unbiased


def norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "batch",
    eps: float = 1e-5,
    training: bool = True,
    running: RunningStats | None = None,
) -> Tensor:
    """Per-channel standardization followed by the affine map gamma*x + beta.

    batch mode normalizes over (B, H, W); instance mode over (H, W) per
    sample.  In batch mode with ``training=False`` the tracked ``running``
    statistics are used instead; with ``training=True`` and ``running`` given
    they are updated in place.
    """
    if x.ndim != 4:
        raise ValueError(f"norm2d expects [B,C,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    if mode == "batch":
        axes = (0, 2, 3)
    elif mode == "instance":
        axes = (2, 3)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    count = int(np.prod([x.shape[a] for a in axes]))
    g4 = gamma.data.reshape(1, C, 1, 1)
    b4 = beta.data.reshape(1, C, 1, 1)
    xd = x.data

    if mode == "batch" and not training:
        if running is None:
            raise ValueError("inference-mode batch normalization needs running statistics")
        inv = 1.0 / np.sqrt(running.var.reshape(1, C, 1, 1) + eps)
        xhat = (xd - running.mean.reshape(1, C, 1, 1)) * inv
        out = (g4 * xhat + b4).astype(xd.dtype)

        def back_eval(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_output("norm2d", out, (x, gamma, beta), back_eval)

    if mode == "batch" and count < 2:
        raise ValueError(f"batch normalization over a population of {count}; use instance mode")
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = g4 * xhat + b4
    if mode == "batch" and training and running is not None:
        corr = count / (count - 1)
        running.update(mu.reshape(C), var.reshape(C) * corr)

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return make_output("norm2d", out.astype(xd.dtype), (x, gamma, beta), back)
