"""Primitive layer computations on channel-major float64 arrays.

Tensors are plain ``numpy.ndarray`` objects in float64, laid out ``[C, H, W]``
for single images. Every op also accepts a leading batch axis
(``[N, C, H, W]`` / ``[N, F]``) so the network can push mini-batches through
the same code path. Convolution is cross-correlation with zero padding.

Each forward op has a matching ``*_backward`` that maps the upstream gradient
to gradients with respect to its inputs and parameters.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError


def as_tensor(values, rank: tuple[int, ...] = (1, 2, 3, 4)) -> np.ndarray:
    """Convert to a float64 array and check rank/finiteness."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in rank:
        raise DimensionError(f"expected rank in {rank}, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"all dimensions must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _batched(x: np.ndarray, single_rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == single_rank:
        return x[np.newaxis], True
    if x.ndim == single_rank + 1:
        return x, False
    raise DimensionError(f"expected rank {single_rank} or {single_rank + 1}, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [N, C, H', W', kh, kw] view into the padded input
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> None:
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be [C_out, C_in, kH, kW], got shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[1] != c_in:
        raise DimensionError(f"channel axis mismatch: input C_in={x.shape[1]}, kernels C_in={c_in}")
    if kh > x.shape[2] + 2 * padding:
        raise DimensionError(f"height axis: kernel {kh} exceeds padded input {x.shape[2] + 2 * padding}")
    if kw > x.shape[3] + 2 * padding:
        raise DimensionError(f"width axis: kernel {kw} exceeds padded input {x.shape[3] + 2 * padding}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias length {bias.shape} does not match C_out={c_out}")


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix ``[N*H'*W', C*kh*kw]`` for a batched input."""
    win = _windows(_pad(x, padding), kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, kernels, bias, stride: int = 1, padding: int = 0, cols: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    xb, single = _batched(x, 3)
    _check_conv(xb, kernels, bias, stride, padding)
    c_out, _, kh, kw = kernels.shape
    n = xb.shape[0]
    ho = conv_output_size(xb.shape[2], kh, stride, padding)
    wo = conv_output_size(xb.shape[3], kw, stride, padding)
    if cols is None:
        cols = im2col(xb, kh, kw, stride, padding)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    return out[0] if single else out


def conv2d_backward(grad_out, x, kernels, stride: int = 1, padding: int = 0,
                    cols: np.ndarray | None = None, input_grad: bool = True):
    """Return ``(grad_x, grad_kernels, grad_bias)``.

    ``cols`` may carry the forward pass's im2col matrix; ``grad_x`` is None
    when ``input_grad`` is false.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    xb, single = _batched(x, 3)
    gb, _ = _batched(np.asarray(grad_out, dtype=np.float64), 3)
    c_out, c_in, kh, kw = kernels.shape
    n, _, h, w = xb.shape
    ho, wo = gb.shape[2], gb.shape[3]
    if cols is None:
        cols = im2col(xb, kh, kw, stride, padding)
    g_mat = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
    grad_k = (g_mat.T @ cols).reshape(kernels.shape)
    grad_b = gb.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, grad_k, grad_b
    grad_xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            tap = np.einsum("nohw,oc->nchw", gb, kernels[:, :, i, j], optimize=True)
            grad_xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += tap
    grad_x = np.ascontiguousarray(grad_xp[:, :, padding:padding + h, padding:padding + w])
    return (grad_x[0] if single else grad_x), grad_k, grad_b


def _pool_taps(xb: np.ndarray, window: int, stride: int, ho: int, wo: int):
    for i in range(window):
        for j in range(window):
            yield i, j, xb[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _pool_argmax(xb: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Running max over window offsets; ties keep the first offset in row-major order."""
    n, c, h, w = xb.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    best = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.intp)
    for i, j, tap in _pool_taps(xb, window, stride, ho, wo):
        better = tap > best
        best = np.where(better, tap, best)
        arg[better] = i * window + j
    return best, arg


def maxpool2d(x, window: int, stride: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x, 3)
    if window < 1 or stride < 1:
        raise DimensionError("window and stride must be positive")
    if window > xb.shape[2] or window > xb.shape[3]:
        raise DimensionError(f"pool window {window} exceeds spatial extent {xb.shape[2:]}")
    n, c, h, w = xb.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = None
    for _, _, tap in _pool_taps(xb, window, stride, ho, wo):
        out = tap.copy() if out is None else np.maximum(out, tap)
    return out[0] if single else out


def maxpool2d_backward(grad_out, x, window: int, stride: int) -> np.ndarray:
    """Route each upstream gradient to the first maximal element of its window."""
    x = np.asarray(x, dtype=np.float64)
    xb, single = _batched(x, 3)
    gb, _ = _batched(np.asarray(grad_out, dtype=np.float64), 3)
    _, arg = _pool_argmax(xb, window, stride)
    ho, wo = gb.shape[2], gb.shape[3]
    grad = np.zeros_like(xb)
    for i in range(window):
        for j in range(window):
            tap = np.where(arg == i * window + j, gb, 0.0)
            grad[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += tap
    return grad[0] if single else grad


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, x) -> np.ndarray:
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0)


def dense(x, weights, bias) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    xb, single = _batched(x, 1)
    if weights.ndim != 2 or weights.shape[1] != xb.shape[1]:
        raise DimensionError(f"weights shape {weights.shape} incompatible with input length {xb.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias length {bias.shape} does not match output width {weights.shape[0]}")
    out = xb @ weights.T + bias
    return out[0] if single else out


def dense_backward(grad_out, x, weights):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    xb, single = _batched(np.asarray(x, dtype=np.float64), 1)
    gb, _ = _batched(np.asarray(grad_out, dtype=np.float64), 1)
    grad_x = gb @ weights
    return (grad_x[0] if single else grad_x), gb.T @ xb, gb.sum(axis=0)


def softmax(x) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)
