"""Double-precision finite-difference checks of every hand-written backward pass.

The error of one comparison is ``max|analytic - numeric|`` divided by the
largest gradient magnitude of either side, so tiny entries cannot blow the
ratio up.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import network as N
from . import tensor as T
from .blocks import RDB, ConvBlock, ConvBlockSpec, RDBSpec
from .wavelet import dwt, dwt_backward, idwt, idwt_backward

STEP = 1e-5
PRIMITIVE_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:<22} rel_err={self.error:.3e} tol={self.tol:g}"


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, indices=None, step=STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place and restored)."""
    if indices is None:
        indices = list(np.ndindex(x.shape))
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        old = x[idx]
        x[idx] = old + step
        fp = f()
        x[idx] = old - step
        fm = f()
        x[idx] = old
        out[k] = (fp - fm) / (2 * step)
    return out


def _rng(seed=0):
    return np.random.default_rng(seed)


def check_conv2d(seed=0, stride=1, pad=1, k=3):
    rng = _rng(seed)
    size = 6 if stride == 1 else 8
    x = rng.standard_normal((1, 2, size, size))
    f = T.ConvFilter(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
    g = rng.standard_normal(T.conv2d(x, f, stride, pad).shape)

    def loss():
        return float(np.sum(g * T.conv2d(x, f, stride, pad)))

    gx, gw, gb = T.conv2d_backward(x, f, g, stride, pad)
    return max(relative_error(gx, numeric_grad(loss, x)),
               relative_error(gw, numeric_grad(loss, f.weight)),
               relative_error(gb, numeric_grad(loss, f.bias)))


def check_iconv2d(seed=0):
    rng = _rng(seed)
    o = rng.standard_normal((2, 3, 4, 4))
    f = T.ConvFilter(rng.standard_normal((3, 2, 2, 2)))
    g = rng.standard_normal(T.iconv2d(o, f, 2).shape)

    def loss():
        return float(np.sum(g * T.iconv2d(o, f, 2)))

    go, gw = T.iconv2d_backward(o, f, g, 2)
    return max(relative_error(go, numeric_grad(loss, o)), relative_error(gw, numeric_grad(loss, f.weight)))


def check_relu(seed=0):
    rng = _rng(seed)
    x = rng.standard_normal((2, 3, 5, 5))
    x[np.abs(x) < 0.05] = 0.5  # stay away from the kink
    g = rng.standard_normal(x.shape)
    return relative_error(T.relu_backward(x, g), numeric_grad(lambda: float(np.sum(g * T.relu(x))), x))


def check_batch_norm(seed=0, mode="train"):
    rng = _rng(seed)
    x = rng.standard_normal((2, 3, 4, 4)) * 2 + 0.5
    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    stats = T.RunningStats(rng.standard_normal(3), rng.random(3) + 0.5, 1)
    g = rng.standard_normal(x.shape)

    def loss():
        return float(np.sum(g * T.batch_norm(x, gamma, beta, stats, mode, update_stats=False)[0]))

    _, cache = T.batch_norm(x, gamma, beta, stats, mode, update_stats=False)
    gx, gg, gb = T.batch_norm_backward(g, cache)
    return max(relative_error(gx, numeric_grad(loss, x)),
               relative_error(gg, numeric_grad(loss, gamma)),
               relative_error(gb, numeric_grad(loss, beta)))


def check_wavelet(seed=0):
    rng = _rng(seed)
    x = rng.standard_normal((2, 2, 6, 8))
    s = rng.standard_normal((2, 8, 3, 4))
    gd = rng.standard_normal((2, 8, 3, 4))
    gi = rng.standard_normal((2, 2, 6, 8))
    e1 = relative_error(dwt_backward(gd), numeric_grad(lambda: float(np.sum(gd * dwt(x))), x))
    e2 = relative_error(idwt_backward(gi), numeric_grad(lambda: float(np.sum(gi * idwt(s))), s))
    return max(e1, e2)


def _block_error(block, x, params, seed):
    rng = _rng(seed + 1)
    y, cache = block.forward(x, params, "train", None)
    g = rng.standard_normal(y.shape)
    grads = {}
    gx = block.backward(g, cache, params, grads)

    def loss():
        return float(np.sum(g * block.forward(x, params, "train", None)[0]))

    # one global scale: a conv bias feeding batch norm has an exactly-zero gradient
    analytic = [gx.ravel()] + [grads[k].ravel() for k in params]
    numeric = [numeric_grad(loss, x)] + [numeric_grad(loss, v) for v in params.values()]
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def _random_params(shapes, rng):
    return {k: rng.standard_normal(s) * (0.5 if k.endswith("weight") else 0.2)
            + (1.0 if k.endswith("bn_gamma") else 0.0) for k, s in shapes.items()}


def check_conv_block(seed=0):
    rng = _rng(seed)
    block = ConvBlock("cb", ConvBlockSpec(3, 4, use_bn=True, use_relu=True))
    return _block_error(block, rng.standard_normal((2, 3, 6, 6)), _random_params(block.param_shapes(), rng), seed)


def check_rdb(seed=0, use_bn=False):
    rng = _rng(seed)
    block = RDB("rdb", RDBSpec(4, 2, use_bn=use_bn))
    return _block_error(block, rng.standard_normal((1, 4, 8, 8)), _random_params(block.param_shapes(), rng), seed)


TINY_CONFIG = N.ModelConfig(levels=2, channels=(4, 8), rdb_depth=2, bn_policy="standard")


def check_network(seed=0, config=TINY_CONFIG, samples_per_tensor=6):
    """End-to-end loss gradient on a 16x16 batch, sampling entries of every tensor."""
    rng = _rng(seed)
    params = N.build(config, seed=seed, dtype=np.float64)
    x = rng.random((2, 1, 16, 16))
    target = rng.random((2, 1, 16, 16))
    _, grads = N.backward(x, target, params, "train")

    def loss():
        return N.loss_value(N.forward(x, params, "train"), target)

    analytic, numeric = [], []
    for name in params.names():
        v = params.values[name]
        flat = rng.choice(v.size, size=min(samples_per_tensor, v.size), replace=False)
        idx = [np.unravel_index(i, v.shape) for i in flat]
        numeric.append(numeric_grad(loss, v, idx))
        analytic.append(np.array([grads[name][i] for i in idx]))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


SUITES: dict[str, tuple[Callable[..., float], float]] = {
    "conv2d": (check_conv2d, PRIMITIVE_TOL),
    "conv2d_stride2": (lambda seed=0: check_conv2d(seed, stride=2, pad=0, k=2), PRIMITIVE_TOL),
    "iconv2d": (check_iconv2d, PRIMITIVE_TOL),
    "relu": (check_relu, PRIMITIVE_TOL),
    "batch_norm_train": (check_batch_norm, PRIMITIVE_TOL),
    "batch_norm_infer": (lambda seed=0: check_batch_norm(seed, mode="infer"), PRIMITIVE_TOL),
    "dwt_idwt": (check_wavelet, PRIMITIVE_TOL),
    "conv_block": (check_conv_block, PRIMITIVE_TOL),
    "rdb": (check_rdb, PRIMITIVE_TOL),
    "rdb_bn": (lambda seed=0: check_rdb(seed, use_bn=True), PRIMITIVE_TOL),
    "network": (check_network, NETWORK_TOL),
}


def run_all(names=None, seed: int = 0) -> list[SuiteResult]:
    results = []
    for name, (fn, tol) in SUITES.items():
        if names and name not in names:
            continue
        results.append(SuiteResult(name, fn(seed), tol))
    return results
