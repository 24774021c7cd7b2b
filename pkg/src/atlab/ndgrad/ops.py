"""Differentiable primitives.

Layout conventions: images are NHWC, convolution kernels are
(kh, kw, C_in, C_out).  Reductions accumulate in float64 and cast back.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import NonFiniteError, ShapeError, Tensor, accumulate, as_tensor, make_result


def _pair(a, b):
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------------------
# elementwise arithmetic with broadcasting


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_result(out, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_result(out, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def _bw(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return make_result(out, (a, b), _bw, "mul")


def square(x: Tensor) -> Tensor:
    def _bw(g):
        accumulate(x, 2.0 * g * x.data)

    return make_result(x.data * x.data, (x,), _bw, "square")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def _bw(g):
        accumulate(x, g * np.sign(x.data))

    return make_result(np.abs(x.data), (x,), _bw, "abs")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def _bw(g):
        accumulate(x, g * 0.5 / out)

    return make_result(out, (x,), _bw, "sqrt")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was inside."""
    out = np.clip(x.data, lo, hi)

    def _bw(g):
        inside = (x.data >= lo) & (x.data <= hi)
        accumulate(x, g * inside)

    return make_result(out, (x,), _bw, "clamp")


# ----------------------------------------------------------------------
# reductions and reshapes


def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def _bw(g):
        accumulate(x, np.broadcast_to(g, x.shape))

    return make_result(out, (x,), _bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)

    def _bw(g):
        accumulate(x, np.broadcast_to(g / n, x.shape))

    return make_result(out, (x,), _bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc

    def _bw(g):
        accumulate(x, g.reshape(x.shape))

    return make_result(out, (x,), _bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accumulate(t, g[tuple(idx)])

    return make_result(out, tuple(tensors), _bw, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NHWC map, giving (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NHWC, got {x.shape}")
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2), dtype=np.float64).astype(x.dtype)

    def _bw(g):
        accumulate(x, np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return make_result(out, (x,), _bw, "global_avg_pool")


# ----------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def _bw(g):
        accumulate(x, g * mask)

    return make_result(out, (x,), _bw, "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    out = x.data * scale

    def _bw(g):
        accumulate(x, g * scale)

    return make_result(out, (x,), _bw, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _bw(g):
        accumulate(x, g * out * (1.0 - out))

    return make_result(out, (x,), _bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _bw(g):
        accumulate(x, g * (1.0 - out * out))

    return make_result(out, (x,), _bw, "tanh")


# ----------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return make_result(out, (a, b), _bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """(out, pad_before, pad_after) for 'same' padding; extra pad goes after."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv_output_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input")
    return ho, wo, (pt, pb, pl, pr)


def _patches(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input and HWIO kernel."""
    x, k = _pair(x, k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and HWIO kernel, got {x.shape}, {k.shape}")
    n, h, w, c = x.shape
    kh, kw, cin, cout = k.shape
    if cin != c:
        raise ShapeError(f"kernel expects {cin} input channels, input has {c}")
    ho, wo, (pt, pb, pl, pr) = conv_output_geometry(h, w, kh, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = np.ascontiguousarray(x.data)
    cols = _patches(xp, kh, kw, ho, wo, stride)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)

    def _bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        if k.requires_grad:
            accumulate(k, (cols.T @ g2).reshape(k.shape))
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + hspan:stride, j:j + wspan:stride, :] += dcols[:, :, :, i, j, :]
            accumulate(x, dxp[:, pt:pt + h, pl:pl + w, :])

    return make_result(out, (x, k), _bw, "conv2d")


# ----------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with the current batch's statistics.

    There are no running averages; evaluation also normalizes with the
    statistics of whatever batch it is handed.
    """
    axes = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, dtype=np.float64)
    var = x.data.var(axis=axes, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    out = xhat * gamma.data + beta.data

    def _bw(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes, dtype=np.float64))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes, dtype=np.float64))
        if x.requires_grad:
            gx = g * gamma.data
            s1 = gx.sum(axis=axes, dtype=np.float64)
            s2 = (gx * xhat).sum(axis=axes, dtype=np.float64)
            dx = (inv / m) * (m * gx - s1 - xhat * s2)
            accumulate(x, dx.astype(x.dtype))

    return make_result(out.astype(x.dtype), (x, gamma, beta), _bw, "batch_norm")


# ----------------------------------------------------------------------
# probabilities and losses


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    p = softmax_np(logits.data)

    def _bw(g):
        accumulate(logits, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make_result(p, (logits,), _bw, "softmax")


def softmax_cross_entropy(logits: Tensor, targets, check_finite: bool = True) -> Tensor:
    """Batch mean of -sum_k target_k log softmax(logits)_k.

    ``targets`` are probability rows, so soft labels from another model work
    the same way as one-hot labels.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and targets {t.shape} must both be (N, K)")
    if logits.shape[1] < 2:
        raise ValueError("softmax_cross_entropy needs at least two classes")
    # float32 soft labels from a softmax drift by a few ulps per class
    tol = 1e-6 if t.dtype == np.float64 else 1e-5
    row_sums = t.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(row_sums - 1.0) > tol):
        raise ValueError("every target row must sum to 1")
    n = logits.shape[0]
    logp = log_softmax_np(logits.data.astype(np.float64))
    loss = -(t * logp).sum(dtype=np.float64) / n
    if check_finite and not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy loss")
    out = np.asarray(loss, dtype=logits.dtype)

    def _bw(g):
        p = np.exp(logp)
        grad = (p * t.sum(axis=1, keepdims=True) - t) * (float(g) / n)
        accumulate(logits, grad.astype(logits.dtype))

    return make_result(out, (logits,), _bw, "softmax_cross_entropy")


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
