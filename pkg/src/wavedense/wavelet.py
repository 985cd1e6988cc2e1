"""Haar subband downsampling (DWT) and upsampling (iDWT) as fixed-filter convolutions.

Channel layout of a DWT output is block-wise: for a c-channel input the
4c output channels are ``[A_0..A_{c-1}, H_0..H_{c-1}, V_0.., D_0..]``.
"""
from __future__ import annotations

import numpy as np

from .tensor import ConvFilter, ShapeError, check_tensor, conv2d, iconv2d

SUBBANDS = ("A", "H", "V", "D")

HAAR_FILTERS = {
    "A": np.array([[1, 1], [1, 1]]),
    "H": np.array([[-1, 1], [-1, 1]]),
    "V": np.array([[-1, -1], [1, 1]]),
    "D": np.array([[1, -1], [-1, 1]]),
}


def haar_bank(dtype=np.float64) -> ConvFilter:
    """The four 2x2 Haar filters stacked as a (4, 1, 2, 2) frozen filter."""
    w = np.stack([HAAR_FILTERS[s] for s in SUBBANDS]).astype(dtype)[:, None]
    w.setflags(write=False)
    return ConvFilter(w, None, trainable=False)


def _bank(dtype, scale=1.0) -> ConvFilter:
    w = np.stack([HAAR_FILTERS[s] for s in SUBBANDS]).astype(dtype)[:, None] * scale
    return ConvFilter(w, None, trainable=False)


def _to_depthwise(x):
    n, c, h, w = x.shape
    return x.reshape(n * c, 1, h, w)


def _blocks_to_depthwise(s):
    # (n, 4c, h, w) block layout -> (n*c, 4, h, w)
    n, c4, h, w = s.shape
    c = c4 // 4
    return s.reshape(n, 4, c, h, w).transpose(0, 2, 1, 3, 4).reshape(n * c, 4, h, w)


def _depthwise_to_blocks(y, n, c):
    _, _, h, w = y.shape
    return np.ascontiguousarray(y.reshape(n, c, 4, h, w).transpose(0, 2, 1, 3, 4)).reshape(n, 4 * c, h, w)


def _analysis(x, scale):
    check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"DWT needs even height and width, got {h}x{w}; pad the input first (see pad_to_grid)"
        )
    y = conv2d(_to_depthwise(x), _bank(x.dtype, scale), stride=2, pad=0)
    return _depthwise_to_blocks(y, n, c)


def _synthesis(s, scale):
    check_tensor(s, "s")
    n, c4, h, w = s.shape
    if c4 % 4:
        raise ShapeError(f"iDWT needs a channel count divisible by 4, got {c4}")
    c = c4 // 4
    y = iconv2d(_blocks_to_depthwise(s), _bank(s.dtype, scale), stride=2)
    return y.reshape(n, c, 2 * h, 2 * w)


def dwt(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> (n, 4c, h/2, w/2) using the raw Haar filters (gain 4 on A)."""
    return _analysis(x, 1.0)


def idwt(s: np.ndarray) -> np.ndarray:
    """(n, 4c, h, w) -> (n, c, 2h, 2w): sum of inverse convolutions with each filter / 4."""
    return _synthesis(s, 0.25)


def dwt_backward(grad_out: np.ndarray) -> np.ndarray:
    # adjoint of dwt: inverse convolution with the unscaled filters
    return _synthesis(grad_out, 1.0)


def idwt_backward(grad_out: np.ndarray) -> np.ndarray:
    # adjoint of idwt: convolution with filters / 4
    return _analysis(grad_out, 0.25)
