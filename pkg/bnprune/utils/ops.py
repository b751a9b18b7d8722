"""
Primitive operators - forward kernels with their recorded backward rules

Every op is a pure function of its inputs. Reductions run in a fixed order
(numpy/BLAS on fixed shapes, explicit python loops over kernel offsets), so
results are reproducible for a given seed.
"""
from typing import NamedTuple, Optional, Sequence, Tuple
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bnprune.exceptions import ShapeError
from bnprune.utils.autodiff import BatchNormParams, Tensor, as_tensor, record

PADDINGS = ("valid", "same")


def output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    """Spatial output length of a window op"""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"valid window of {kernel} does not fit input length {size}")
        return (size - kernel) // stride + 1
    if padding == "same":
        return math.ceil(size / stride)
    raise ValueError(f"padding must be one of {PADDINGS}, got '{padding}'")


def pad_amounts(size: int, kernel: int, stride: int, padding: str) -> Tuple[int, int]:
    """(before, after) padding; the odd extra goes after (bottom/right)"""
    if padding == "valid":
        return 0, 0
    out = output_size(size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N, oh, ow, C, kh, kw) view
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride][:, :oh, :ow]


def _check_image(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects (N, H, W, C) input, got shape {x.shape}")


def conv2d(x, kernel, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of NHWC input with a (kh, kw, Cin, Cout) kernel"""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2] != x.shape[3]:
        raise ShapeError(
            f"conv2d input shape {x.shape} does not match kernel shape {kernel.shape} "
            "(expected input (N, H, W, Cin) and kernel (kh, kw, Cin, Cout))"
        )
    kh, kw, cin, cout = kernel.shape
    n, h, w, _ = x.shape
    oh, ow = output_size(h, kh, stride, padding), output_size(w, kw, stride, padding)
    pt, pb = pad_amounts(h, kh, stride, padding)
    pl, pr = pad_amounts(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = _windows(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(win, kernel.data, axes=([3, 4, 5], [2, 0, 1]))

    def _backward(g: np.ndarray):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += (
                        g @ kernel.data[i, j].T
                    )
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return gx, gk

    return record("conv2d", (x, kernel), Tensor(out), _backward)


def bias_add(x, bias) -> Tensor:
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not match channels of input {x.shape}")
    axes = tuple(range(x.ndim - 1))

    def _backward(g: np.ndarray):
        return g, g.sum(axis=axes)

    return record("bias_add", (x, bias), Tensor(x.data + bias.data), _backward)


class BatchNormOutput(NamedTuple):
    output: Tensor
    params: BatchNormParams


def batchnorm(x, params: BatchNormParams, mode: str = "training", epsilon: Optional[float] = None) -> BatchNormOutput:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta over the last axis

    Training mode uses the biased batch variance over every axis but the
    channel axis and returns updated moving statistics; inference mode uses
    the moving statistics unchanged. ``epsilon`` overrides params.epsilon
    (0 allowed) for analysis.
    """
    x = as_tensor(x)
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got '{mode}'")
    channels = params.channels
    if x.ndim < 1 or x.shape[-1] != channels:
        raise ShapeError(f"batchnorm over {channels} channels got input shape {x.shape}")
    eps = params.epsilon if epsilon is None else float(epsilon)
    if eps < 0:
        raise ValueError(f"epsilon must be >= 0, got {eps}")

    axes = tuple(range(x.ndim - 1))
    count = x.size // channels
    gamma, beta = params.gamma, params.beta
    training = mode == "training"

    if training:
        if count == 0:
            raise ShapeError("batchnorm in training mode needs a non-empty batch")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = params.momentum
        new_params = params.with_moving_stats(
            m * params.moving_mean + (1 - m) * mean,
            m * params.moving_var + (1 - m) * var,
        )
    else:
        mean, var = params.moving_mean, params.moving_var
        new_params = params

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def _backward(g: np.ndarray):
        g_gamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        g_beta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_xhat = g * gamma.data
            if training:
                gx = (inv_std / count) * (
                    count * g_xhat - g_xhat.sum(axis=axes) - xhat * (g_xhat * xhat).sum(axis=axes)
                )
            else:
                gx = g_xhat * inv_std
        return gx, g_gamma, g_beta

    output = record("batchnorm", (x, gamma, beta), Tensor(out), _backward)
    return BatchNormOutput(output, new_params)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def _backward(g: np.ndarray):
        return (g * positive,)

    # NaN propagates
    return record("relu", (x,), Tensor(np.maximum(x.data, 0).astype(x.dtype)), _backward)


def _pool_geometry(x: Tensor, k: int, stride: int, padding: str):
    _, h, w, _ = x.shape
    oh, ow = output_size(h, k, stride, padding), output_size(w, k, stride, padding)
    return oh, ow, pad_amounts(h, k, stride, padding), pad_amounts(w, k, stride, padding)


def maxpool(x, k: int, stride: int, padding: str = "valid") -> Tensor:
    """Max over k x k windows; same padding pads with -inf"""
    x = as_tensor(x)
    _check_image(x, "maxpool")
    n, h, w, c = x.shape
    oh, ow, (pt, pb), (pl, pr) = _pool_geometry(x, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf)
    flat = _windows(xp, k, k, stride, oh, ow).reshape(n, oh, ow, c, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for p in range(k * k):
            i, j = divmod(p, k)
            gxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += np.where(
                idx == p, g, 0
            )
        return (gxp[:, pt:pt + h, pl:pl + w, :],)

    return record("maxpool", (x,), Tensor(out), _backward)


def avgpool(x, k: int, stride: int, padding: str = "valid") -> Tensor:
    """Mean over the in-bounds part of each k x k window"""
    x = as_tensor(x)
    _check_image(x, "avgpool")
    n, h, w, c = x.shape
    oh, ow, (pt, pb), (pl, pr) = _pool_geometry(x, k, stride, padding)
    pads = ((0, 0), (pt, pb), (pl, pr), (0, 0))
    xp = np.pad(x.data, pads)
    ones = np.pad(np.ones((1, h, w, 1), dtype=x.dtype), pads)
    counts = _windows(ones, k, k, stride, oh, ow).sum(axis=(-2, -1))
    out = _windows(xp, k, k, stride, oh, ow).sum(axis=(-2, -1)) / counts

    def _backward(g: np.ndarray):
        share = g / counts
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] += share
        return (gxp[:, pt:pt + h, pl:pl + w, :],)

    return record("avgpool", (x,), Tensor(out), _backward)


def dense(x, weight, bias=None) -> Tensor:
    """x @ W (+ b) for x of shape (N, D)"""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense input shape {x.shape} does not match weight shape {weight.shape}")
    inputs: Tuple[Tensor, ...] = (x, weight)
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} does not match weight shape {weight.shape}")
        out = out + bias.data
        inputs = inputs + (bias,)

    def _backward(g: np.ndarray):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return record("dense", inputs, Tensor(out), _backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(tuple(shape))

    def _backward(g: np.ndarray):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), Tensor(out), _backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")

    def _backward(g: np.ndarray):
        return g, g

    return record("add", (a, b), Tensor(a.data + b.data), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")

    def _backward(g: np.ndarray):
        return g * b.data, g * a.data

    return record("mul", (a, b), Tensor(a.data * b.data), _backward)


def shortcut(x, stride: int, channels: int) -> Tensor:
    """Strided identity, zero-padding channels evenly on both sides"""
    x = as_tensor(x)
    _check_image(x, "shortcut")
    c = x.shape[3]
    if channels < c:
        raise ShapeError(f"shortcut cannot shrink {c} channels to {channels}")
    lo = (channels - c) // 2
    sub = x.data[:, ::stride, ::stride, :]
    out = np.pad(sub, ((0, 0), (0, 0), (0, 0), (lo, channels - c - lo)))

    def _backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, ::stride, ::stride, :] = g[..., lo:lo + c]
        return (gx,)

    return record("shortcut", (x,), Tensor(out), _backward)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def _backward(g: np.ndarray):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record("sum", (x,), Tensor(np.sum(x.data)), _backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)"""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not pair up")
    n, classes = logits.shape
    if n == 0:
        raise ShapeError("cross-entropy of an empty batch")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must be integers in [0, {classes}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(log_norm - shifted[rows, labels])

    def _backward(g: np.ndarray):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1
        return (probs * (g / n),)

    return record("softmax_cross_entropy", (logits,), Tensor(np.asarray(loss, dtype=logits.dtype)), _backward)
