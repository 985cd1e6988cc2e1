"""Learned building blocks: the 3x3 conv block and the residual dense block.

Parameters live in a flat ``name -> array`` mapping; every block owns the
keys under its own name prefix. BN running statistics are passed
separately as ``stats`` (``name -> RunningStats``). When ``stats`` is None
train mode still normalizes with batch statistics but nothing is updated,
which is what finite-difference checks need.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvFilter, RunningStats, ShapeError

KERNEL = 3


@dataclass(frozen=True)
class ConvBlockSpec:
    c_in: int
    c_out: int
    use_bn: bool = False
    use_relu: bool = True
    kernel: int = KERNEL

    def __post_init__(self):
        if self.kernel != KERNEL:
            raise ValueError(f"learned convolutions are {KERNEL}x{KERNEL}, got {self.kernel}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"channel counts must be positive: {self.c_in} -> {self.c_out}")


@dataclass(frozen=True)
class RDBSpec:
    c: int
    depth: int = 3
    use_bn: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"RDB depth must be >= 1, got {self.depth}")
        if self.c < 1:
            raise ValueError(f"RDB channels must be positive, got {self.c}")

    @property
    def concat_channels(self) -> int:
        return (self.depth + 1) * self.c


class ConvBlock:
    """3x3 conv (stride 1, pad 1), then optional batch norm, then optional ReLU."""

    def __init__(self, name: str, spec: ConvBlockSpec):
        self.name = name
        self.spec = spec

    def param_shapes(self) -> dict[str, tuple]:
        s = self.spec
        shapes = {
            f"{self.name}.weight": (s.c_out, s.c_in, s.kernel, s.kernel),
            f"{self.name}.bias": (s.c_out,),
        }
        if s.use_bn:
            shapes[f"{self.name}.bn_gamma"] = (s.c_out,)
            shapes[f"{self.name}.bn_beta"] = (s.c_out,)
        return shapes

    def stat_names(self) -> list[str]:
        return [f"{self.name}.bn"] if self.spec.use_bn else []

    def forward(self, x, params, mode="train", stats=None):
        if x.shape[1] != self.spec.c_in:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} has {x.shape[1]} channels, expected {self.spec.c_in}"
            )
        f = ConvFilter(params[f"{self.name}.weight"], params[f"{self.name}.bias"])
        y, cols = T.conv2d(x, f, stride=1, pad=self.spec.kernel // 2, return_cols=True)
        bn = None
        if self.spec.use_bn:
            rs = None if stats is None else stats[f"{self.name}.bn"]
            if mode == "infer" and rs is None:
                raise RuntimeError(f"{self.name}: infer mode needs running BN statistics")
            y, bn = T.batch_norm(y, params[f"{self.name}.bn_gamma"], params[f"{self.name}.bn_beta"],
                                 rs, mode, update_stats=stats is not None)
        pre = y
        if self.spec.use_relu:
            y = T.relu(y)
        return y, (x, cols, bn, pre)

    def backward(self, grad, cache, params, grads):
        x, cols, bn, pre = cache
        if self.spec.use_relu:
            grad = T.relu_backward(pre, grad)
        if bn is not None:
            grad, gg, gb = T.batch_norm_backward(grad, bn)
            _accumulate(grads, f"{self.name}.bn_gamma", gg)
            _accumulate(grads, f"{self.name}.bn_beta", gb)
        f = ConvFilter(params[f"{self.name}.weight"], params[f"{self.name}.bias"])
        gx, gw, gbias = T.conv2d_backward(x, f, grad, 1, self.spec.kernel // 2, cols=cols)
        _accumulate(grads, f"{self.name}.weight", gw)
        _accumulate(grads, f"{self.name}.bias", gbias)
        return gx


class RDB:
    """Residual dense block.

    Each internal conv block sees the concatenation of the block input and
    every earlier output; a 3x3 fusion conv maps the (depth+1)*c channels
    back to c and the result is added to the input.
    """

    def __init__(self, name: str, spec: RDBSpec):
        self.name = name
        self.spec = spec
        c = spec.c
        self.inner = [
            ConvBlock(f"{name}.cb{t}", ConvBlockSpec(t * c, c, use_bn=spec.use_bn))
            for t in range(1, spec.depth + 1)
        ]
        self.fuse = ConvBlock(f"{name}.fuse", ConvBlockSpec(spec.concat_channels, c,
                                                            use_bn=False, use_relu=False))

    @property
    def conv_blocks(self) -> list[ConvBlock]:
        """Internal conv blocks; the fusion conv is a plain layer and not counted."""
        return list(self.inner)

    def param_shapes(self):
        shapes = {}
        for b in self.inner + [self.fuse]:
            shapes.update(b.param_shapes())
        return shapes

    def stat_names(self):
        return [n for b in self.inner for n in b.stat_names()]

    def forward(self, r, params, mode="train", stats=None):
        if r.shape[1] != self.spec.c:
            raise ShapeError(f"{self.name}: input shape {r.shape} has {r.shape[1]} channels, expected {self.spec.c}")
        state = r
        caches = []
        for block in self.inner:
            out, cache = block.forward(state, params, mode, stats)
            caches.append(cache)
            state = T.concat_channels([state, out])
        fused, fcache = self.fuse.forward(state, params, mode, stats)
        return T.add(r, fused), (caches, fcache)

    def backward(self, grad, cache, params, grads):
        caches, fcache = cache
        c = self.spec.c
        g_state = self.fuse.backward(grad, fcache, params, grads)
        for t in range(self.spec.depth, 0, -1):
            g_prev, g_out = T.split_channels(g_state, [t * c, c])
            g_state = g_prev + self.inner[t - 1].backward(g_out, caches[t - 1], params, grads)
        # residual shortcut
        return g_state + grad


def _accumulate(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def conv_block_forward(x, spec: ConvBlockSpec, params, mode="train", name="cb",
                       stats: dict[str, RunningStats] | None = None) -> np.ndarray:
    return ConvBlock(name, spec).forward(x, params, mode, stats)[0]


def rdb_forward(r, spec: RDBSpec, params, mode="train", name="rdb",
                stats: dict[str, RunningStats] | None = None) -> np.ndarray:
    return RDB(name, spec).forward(r, params, mode, stats)[0]
