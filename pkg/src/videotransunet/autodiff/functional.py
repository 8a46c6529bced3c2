"""Neural-network primitives with fused backward rules.

Spatial ops take ``(N, C, H, W)`` arrays; a ``(C, H, W)`` input is treated
as a batch of one and returned without the batch axis.
"""

from __future__ import annotations

import functools

import numpy as np

from .tensor import Tensor, as_tensor


def _batched(fn):
    @functools.wraps(fn)
    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 3:
            out = fn(x.reshape((1,) + x.shape), *args, **kwargs)
            return out.reshape(out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"{fn.__name__} expects a 3-D or 4-D input, got shape {x.shape}")
        return fn(x, *args, **kwargs)

    return wrapper


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Padded (N, C, H, W) -> (C*k*k, N*ho*wo) column matrix."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xt[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns padded (N, C, H, W)."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s] += cols[:, dy, dx]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output extent {ho}x{wo} < 1 for input {h}x{wd}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    xp = _pad(x, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    out = w.reshape(co, -1) @ cols
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    return out, cols, xp.shape


def _conv_transpose_forward(y: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, co, ho, wo = y.shape
    _, ci, k, _ = w.shape
    hp, wp = (ho - 1) * stride + k, (wo - 1) * stride + k
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ValueError(f"conv_transpose2d output extent < 1 for input {ho}x{wo}")
    ym = y.transpose(1, 0, 2, 3).reshape(co, -1)
    cols = w.reshape(co, -1).T @ ym
    out = _col2im(cols, (n, ci, hp, wp), k, stride, ho, wo)
    return np.ascontiguousarray(_unpad(out, padding)), ym


@_batched
def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``kernel`` of shape ``(C_out, C_in, k, k)``."""
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    if kernel.shape[2] % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {kernel.shape[2]}")
    wd = kernel.data
    out, cols, padded_shape = _conv_forward(x.data, wd, stride, padding)
    co, _, k, _ = wd.shape
    _, _, ho, wo = out.shape

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gx = gk = None
        if x.requires_grad:
            dcols = wd.reshape(co, -1).T @ gm
            gx = np.ascontiguousarray(_unpad(_col2im(dcols, padded_shape, k, stride, ho, wo), padding))
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(wd.shape)
        return gx, gk

    result = Tensor._result(out, (x, kernel), backward, "conv2d")
    if bias is not None:
        result = result + as_tensor(bias).reshape((1, -1, 1, 1))
    return result


@_batched
def conv_transpose2d(y, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``(C_out, C_in, k, k)`` kernel.

    Maps ``C_out`` channels back to ``C_in``; spatial extent
    ``(H - 1) * stride + k - 2 * padding``.
    """
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    if kernel.shape[0] != y.shape[1]:
        raise ValueError(f"kernel expects {kernel.shape[0]} input channels, input has {y.shape[1]}")
    wd = kernel.data
    out, ym = _conv_transpose_forward(y.data, wd, stride, padding)
    co, _, k, _ = wd.shape
    ho, wo = y.shape[2], y.shape[3]

    def backward(g):
        gp = _pad(g, padding)
        gcols = _im2col(gp, k, stride, ho, wo)
        gy = gk = None
        if y.requires_grad:
            gy = wd.reshape(co, -1) @ gcols
            gy = np.ascontiguousarray(gy.reshape(co, g.shape[0], ho, wo).transpose(1, 0, 2, 3))
        if kernel.requires_grad:
            gk = (ym @ gcols.T).reshape(wd.shape)
        return gy, gk

    result = Tensor._result(out, (y, kernel), backward, "conv_transpose2d")
    if bias is not None:
        result = result + as_tensor(bias).reshape((1, -1, 1, 1))
    return result


def _pool_windows(x: np.ndarray, k: int, s: int):
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, k, s, 0), _out_extent(w, k, s, 0)
    if ho < 1 or wo < 1:
        raise ValueError(f"pooling window {k} larger than input {h}x{w}")
    wins = np.empty((k * k, n, c, ho, wo), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            wins[dy * k + dx] = x[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s]
    return wins, ho, wo


@_batched
def max_pool2d(x, kernel_size: int = 2, stride: int | None = None) -> Tensor:
    k, s = kernel_size, stride or kernel_size
    wins, ho, wo = _pool_windows(x.data, k, s)
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        for dy in range(k):
            for dx in range(k):
                gx[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s] += g * (arg == dy * k + dx)
        return (gx,)

    return Tensor._result(out, (x,), backward, "max_pool2d")


@_batched
def avg_pool2d(x, kernel_size: int = 2, stride: int | None = None) -> Tensor:
    k, s = kernel_size, stride or kernel_size
    wins, ho, wo = _pool_windows(x.data, k, s)
    out = wins.mean(axis=0)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        share = g / (k * k)
        for dy in range(k):
            for dx in range(k):
                gx[:, :, dy : dy + s * ho : s, dx : dx + s * wo : s] += share
        return (gx,)

    return Tensor._result(out, (x,), backward, "avg_pool2d")


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n: int, factor: int, dtype: str) -> np.ndarray:
    """Interpolation matrix (n*factor, n), half-pixel centres, edge clamped."""
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    mat = np.zeros((m, n))
    mat[np.arange(m), lo] += 1 - frac
    mat[np.arange(m), hi] += frac
    mat.setflags(write=False)
    return mat.astype(dtype)


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ah = _bilinear_matrix(h, factor, x.dtype.str)
    aw = _bilinear_matrix(w, factor, x.dtype.str)
    out = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return Tensor._result(out, (x,), backward, "upsample_bilinear")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def _normalize_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    mean_g = g_hat.mean(axis=axes, keepdims=True)
    mean_gx = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - mean_g - xhat * mean_gx)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional gain and bias."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std

    def backward(g):
        return (_normalize_backward(g, xhat, inv_std, -1).astype(xd.dtype),)

    out = Tensor._result(xhat.astype(xd.dtype), (x,), backward, "layer_norm")
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


@_batched
def group_norm(x, groups: int, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalisation of (N, C, H, W) with per-channel affine."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xd = x.data.reshape(n, groups, -1)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std

    def backward(g):
        gx = _normalize_backward(g.reshape(n, groups, -1), xhat, inv_std, -1)
        return (gx.reshape(n, c, h, w).astype(x.dtype),)

    out = Tensor._result(xhat.reshape(n, c, h, w).astype(x.dtype), (x,), backward, "group_norm")
    if gain is not None:
        out = out * as_tensor(gain).reshape((1, c, 1, 1))
    if bias is not None:
        out = out + as_tensor(bias).reshape((1, c, 1, 1))
    return out


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    out = as_tensor(x) @ weight
    if bias is not None:
        out = out + bias
    return out
