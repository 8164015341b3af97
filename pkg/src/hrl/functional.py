"""Differentiable operations used by the hybrid network.

Every function here takes and returns :class:`~hrl.tensor.Tensor` objects and
carries a hand-written backward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

# When a list, piecewise ops append a digest of their branch decisions
# (ReLU masks, max-pool argmax) so finite-difference checks can spot kinks.
_branch_log: list[int] | None = None


@contextlib.contextmanager
def record_branches() -> Iterator[list[int]]:
    global _branch_log
    previous = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def _log_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(hash(decision.tobytes()))


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or 3 ints, got {v!r}")
    return t  # type: ignore[return-value]


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kernel, stride) -> np.ndarray:
    """View of shape [B, C, D', H', W', kd, kh, kw] over a padded input."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    return win[:, :, :: stride[0], :: stride[1], :: stride[2]]


def _scatter_windows(gxp: np.ndarray, gwin: np.ndarray, out_shape, stride) -> None:
    """Add window gradients [B, C, D', H', W', kd, kh, kw] back onto the padded grid."""
    od, oh, ow = out_shape
    sd, sh, sw = stride
    kd, kh, kw = gwin.shape[-3:]
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                gxp[:, :, a : a + sd * od : sd, b : b + sh * oh : sh, c : c + sw * ow : sw] += gwin[..., a, b, c]


# ----------------------------------------------------------------------
# convolution and pooling


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of ``x`` [B,Cin,D,H,W] with ``weight`` [Cout,Cin,k,k,k]."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {weight.shape} expects {weight.shape[1]}"
        )
    stride = _triple(stride)
    padding = _triple(padding)
    kernel = weight.shape[2:]
    if min(stride) < 1 or min(padding) < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    for n, k, p in zip(x.shape[2:], kernel, padding):
        if n + 2 * p < k:
            raise ShapeError(f"conv3d kernel {kernel} larger than padded input {x.shape[2:]}")

    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad) if any(padding) else x.data
    win = _windows(xp, kernel, stride)
    out_spatial = win.shape[2:5]
    # [B, D', H', W', Cout] -> [B, Cout, D', H', W']
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4])).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            # [B, D', H', W', Cin, k, k, k] -> [B, Cin, D', H', W', k, k, k]
            gwin = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 4, 1, 2, 3, 5, 6, 7)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            _scatter_windows(gxp, gwin, out_spatial, stride)
            d, h, w = x.shape[2:]
            pd, ph, pw = padding
            gx = gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def pool3d(x: Tensor, kind: str = "max", kernel=2, stride=None, padding=0) -> Tensor:
    """Max or average pooling over the three trailing axes of a 5-d tensor.

    Max pooling pads with -inf; average pooling pads with zeros and divides by
    the full window volume.
    """
    if kind not in ("max", "average"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 5:
        raise ShapeError(f"pool3d expects a 5-d tensor, got {x.shape}")
    kernel = _triple(kernel)
    stride = kernel if stride is None else _triple(stride)
    padding = _triple(padding)
    if min(kernel) < 1 or min(stride) < 1:
        raise ValueError("kernel and stride must be >= 1")
    for n, k, p in zip(x.shape[2:], kernel, padding):
        if n + 2 * p < k:
            raise ShapeError(f"pool3d kernel {kernel} larger than padded input {x.shape[2:]}")

    fill = -np.inf if kind == "max" else 0.0
    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pad, constant_values=fill) if any(padding) else x.data
    win = _windows(xp, kernel, stride)
    out_spatial = win.shape[2:5]
    volume = kernel[0] * kernel[1] * kernel[2]
    flat = win.reshape(win.shape[:5] + (volume,))

    if kind == "max":
        arg = flat.argmax(axis=-1)
        _log_branch(arg)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        arg = None
        out = flat.mean(axis=-1)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        if kind == "max":
            onehot = np.zeros(flat.shape, dtype=x.dtype)
            np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
            gwin = onehot.reshape(win.shape)
        else:
            gwin = np.broadcast_to((g / volume)[..., None, None, None], win.shape)
        _scatter_windows(gxp, gwin, out_spatial, stride)
        d, h, w = x.shape[2:]
        pd, ph, pw = padding
        return (gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w],)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


# ----------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats | None = None,
    training: bool = True,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each channel (axis 1) over the batch and spatial axes."""
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} does not match {gamma.shape[0]} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    n = x.data.size // x.shape[1]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats is not None:
            m = stats.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            stats.mean[...] = (1 - m) * stats.mean + m * mu
            stats.var[...] = (1 - m) * stats.var + m * unbiased
    else:
        if stats is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mu, var = stats.mean, stats.var

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes, keepdims=True)
                s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(bshape) / n * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every slice along the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: last extent {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv / d * (
                d * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------
# dense


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


# ----------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor.from_op(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    fns = {"relu": relu, "gelu": gelu, "tanh": tanh, "softmax": softmax}
    try:
        return fns[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return Tensor.from_op(loss, (logits,), backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """softmax(q k^T / sqrt(d)) v over the last two axes; also returns the weights."""
    d = q.shape[-1]
    scores = (q @ k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d))
    weights = softmax(scores)
    return weights @ v, weights.data
