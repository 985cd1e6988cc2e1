"""Dense NCHW array primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width). Gradients are returned as separate arrays
rather than stored on the tensor. Every primitive keeps the dtype of its
input, so float64 inputs give a float64 path for gradient checking and
float32 inputs give the fast path used for training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform to an operation."""


def check_tensor(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        shape = getattr(x, "shape", None)
        raise ShapeError(f"{name} must be a rank-4 (n, c, h, w) array, got shape {shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass
class ConvFilter:
    """Convolution weights of shape (c_out, c_in, k_h, k_w) plus a bias vector."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    trainable: bool = True

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"filter weight must be rank 4, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}"
            )

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weight.shape


def _out_size(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded {axis} {size + 2 * pad}")
    if span % stride:
        raise ShapeError(
            f"padded {axis} {size + 2 * pad} minus kernel {k} is not divisible by stride {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Unfold to (c*kh*kw, n*oh*ow); rows ordered (c, kh, kw), columns (n, oh, ow)."""
    n, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    """Scatter-add (c*kh*kw, n*oh*ow) columns back onto an (n, c, h, w) grid."""
    n, c, h, w = shape
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _to_rows(t: np.ndarray) -> np.ndarray:
    # (n, c, h, w) -> (c, n*h*w)
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _from_rows(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = rows.shape[0]
    return np.ascontiguousarray(rows.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: np.ndarray, f: ConvFilter, stride: int = 1, pad: int = 0,
           return_cols: bool = False):
    """Cross-correlate ``x`` with ``f`` (no kernel flip) and add the bias.

    With ``return_cols`` the unfolded input is returned too, so a following
    :func:`conv2d_backward` can skip re-unfolding.
    """
    check_tensor(x)
    c_out, c_in, kh, kw = f.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"input shape {x.shape} has {c} channels but filter shape {f.shape} expects {c_in}")
    if stride < 1 or pad < 0:
        raise ValueError(f"stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    oh = _out_size(h, kh, stride, pad, "height")
    ow = _out_size(w, kw, stride, pad, "width")
    cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    y = f.weight.reshape(c_out, -1).astype(x.dtype, copy=False) @ cols
    if f.bias is not None:
        y += f.bias.astype(x.dtype, copy=False)[:, None]
    y = _from_rows(y, n, oh, ow)
    return (y, cols) if return_cols else y


def conv2d_backward(x: np.ndarray, f: ConvFilter, grad_out: np.ndarray, stride: int = 1,
                    pad: int = 0, cols: np.ndarray | None = None):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`conv2d`."""
    check_tensor(x)
    c_out, c_in, kh, kw = f.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"input shape {x.shape} does not match filter shape {f.shape}")
    oh = _out_size(h, kh, stride, pad, "height")
    ow = _out_size(w, kw, stride, pad, "width")
    if grad_out.shape != (n, c_out, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output {(n, c_out, oh, ow)} "
            f"for input {x.shape} and filter {f.shape}"
        )
    if cols is None:
        cols = _im2col(x, kh, kw, stride, pad, oh, ow)
    g = _to_rows(grad_out)
    grad_w = (g @ cols.T).reshape(f.shape)
    grad_b = g.sum(axis=1)
    dcols = f.weight.reshape(c_out, -1).T.astype(x.dtype, copy=False) @ g
    grad_x = _col2im(dcols, x.shape, kh, kw, stride, pad, oh, ow)
    return grad_x, grad_w, grad_b


def iconv2d(o: np.ndarray, f: ConvFilter, stride: int) -> np.ndarray:
    """Inverse (transposed) convolution: scatter each ``o`` value through ``f``.

    This is the exact adjoint of ``conv2d(., f, stride, pad=0)`` without bias,
    so for stride equal to the kernel size the output is ``stride`` times
    larger in each spatial dimension.
    """
    check_tensor(o, "o")
    c_out, c_in, kh, kw = f.shape
    n, c, h, w = o.shape
    if c != c_out:
        raise ShapeError(f"input shape {o.shape} has {c} channels but filter shape {f.shape} has c_out={c_out}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out_shape = (n, c_in, (h - 1) * stride + kh, (w - 1) * stride + kw)
    cols = f.weight.reshape(c_out, -1).T.astype(o.dtype, copy=False) @ _to_rows(o)
    return _col2im(cols, out_shape, kh, kw, stride, 0, h, w)


def iconv2d_backward(o: np.ndarray, f: ConvFilter, grad_out: np.ndarray, stride: int):
    """Return ``(grad_o, grad_weight)`` for :func:`iconv2d`."""
    check_tensor(o, "o")
    c_out, c_in, kh, kw = f.shape
    n, c, h, w = o.shape
    expected = (n, c_in, (h - 1) * stride + kh, (w - 1) * stride + kw)
    if c != c_out or grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match iconv output {expected}")
    cols = _im2col(grad_out, kh, kw, stride, 0, h, w)
    grad_o = f.weight.reshape(c_out, -1).astype(o.dtype, copy=False) @ cols
    grad_w = _to_rows(o) @ cols.T
    return _from_rows(grad_o, n, h, w), grad_w.reshape(f.shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


@dataclass
class RunningStats:
    """Exponential moving averages of per-channel batch statistics."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), 0)


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool = field(default=True)


def batch_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               running_stats: RunningStats | None, mode: str = "train",
               update_stats: bool = True):
    """Per-channel batch normalization. Returns ``(y, cache)``.

    Train mode normalizes with the batch mean and biased variance over
    (n, h, w) and, if ``update_stats``, folds them into ``running_stats``
    (unbiased variance, momentum ``BN_MOMENTUM``). Infer mode uses the running
    statistics and refuses to run before any have been accumulated.
    """
    check_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    g = gamma.astype(x.dtype, copy=False)[None, :, None, None]
    b = beta.astype(x.dtype, copy=False)[None, :, None, None]
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats and running_stats is not None:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (m / max(m - 1, 1))
            rs = running_stats
            rs.mean[...] = (1 - BN_MOMENTUM) * rs.mean + BN_MOMENTUM * mean
            rs.var[...] = (1 - BN_MOMENTUM) * rs.var + BN_MOMENTUM * unbiased
            rs.count += 1
    elif mode == "infer":
        if running_stats is None or running_stats.count == 0:
            raise RuntimeError("batch_norm in infer mode needs running statistics; train first")
        mean = running_stats.mean.astype(x.dtype, copy=False)
        var = running_stats.var.astype(x.dtype, copy=False)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat * g + b, BNCache(xhat, inv_std.astype(x.dtype, copy=False), gamma, mode == "train")


def batch_norm_backward(grad_out: np.ndarray, cache: BNCache):
    """Return ``(grad_x, grad_gamma, grad_beta)`` for :func:`batch_norm`."""
    xhat, inv_std = cache.xhat, cache.inv_std
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match {xhat.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    g = cache.gamma.astype(grad_out.dtype, copy=False)[None, :, None, None]
    dxhat = grad_out * g
    scale = inv_std[None, :, None, None]
    if not cache.train:
        return dxhat * scale, grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_x = scale / m * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        check_tensor(t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concatenate {t.shape} with {xs[0].shape}: (n, h, w) differ")
    return np.concatenate(xs, axis=1)


def split_channels(grad: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Backward of :func:`concat_channels`: slice ``grad`` into per-input pieces."""
    if sum(sizes) != grad.shape[1]:
        raise ShapeError(f"channel sizes {sizes} do not sum to {grad.shape[1]}")
    return np.split(grad, np.cumsum(sizes)[:-1], axis=1)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"cannot add shapes {x.shape} and {y.shape}")
    return x + y
