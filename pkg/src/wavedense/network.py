"""The n-level wavelet U-shaped denoiser with residual dense blocks at every level.

Dataflow for levels ``i = 1..n`` (all convs 3x3, spatially preserving)::

    down:  W_i  = dwt(W*_{i-1})              (W*_0 = input image)
           W*_i = RDB(CB(W_i))
    turn:  U_{n-1} = idwt(CB(W*_n))
    up:    U*_i = CB(RDB(U_i + W*_i))        for i = n-1..1
           U_{i-1} = idwt(U*_i)
    output = U_0

The last conv block (the one feeding the final idwt) is a bare conv layer.
"""
from __future__ import annotations

import functools
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .blocks import RDB, ConvBlock, ConvBlockSpec, RDBSpec
from .tensor import RunningStats, ShapeError, add, check_tensor
from .wavelet import dwt, dwt_backward, idwt, idwt_backward

BN_POLICIES = ("standard", "none", "all")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``bn_policy``:
      * ``standard``: batch norm in every conv block except the first one
        after the first DWT and the final bare conv;
      * ``none``: no batch norm anywhere;
      * ``all``: batch norm everywhere except the final bare conv.
    """

    levels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    rdb_depth: int = 3
    bn_policy: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError(f"need one channel width per level: levels={self.levels}, channels={self.channels}")
        for i, c in enumerate(self.channels, 1):
            if c < 1:
                raise ValueError(f"level {i}: channel width must be positive, got {c}")
        if self.rdb_depth < 1:
            raise ValueError(f"rdb_depth must be >= 1, got {self.rdb_depth}")
        if self.bn_policy not in BN_POLICIES:
            raise ValueError(f"bn_policy must be one of {BN_POLICIES}, got {self.bn_policy!r}")

    @property
    def grid(self) -> int:
        return 2 ** self.levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(levels=int(d["levels"]), channels=tuple(d["channels"]),
                   rdb_depth=int(d["rdb_depth"]), bn_policy=str(d["bn_policy"]))

    def diff(self, other: "ModelConfig") -> list[str]:
        a, b = self.to_dict(), other.to_dict()
        return [f"{k}: {a[k]} != {b[k]}" for k in a if a[k] != b[k]]


@dataclass
class ParamStore:
    """Learnable tensors with their Adam moments, in a fixed deterministic order.

    ``stats`` holds batch-norm running statistics; they are model state but
    not learnable, so the optimizer never sees them.
    """

    config: ModelConfig
    values: OrderedDict = field(default_factory=OrderedDict)
    adam_m: OrderedDict = field(default_factory=OrderedDict)
    adam_v: OrderedDict = field(default_factory=OrderedDict)
    stats: OrderedDict = field(default_factory=OrderedDict)

    def names(self) -> list[str]:
        return list(self.values)

    def __getitem__(self, name):
        return self.values[name]

    def __len__(self):
        return len(self.values)

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())

    @property
    def dtype(self):
        return next(iter(self.values.values())).dtype

    def copy(self) -> "ParamStore":
        def dup(d):
            return OrderedDict((k, v.copy()) for k, v in d.items())

        stats = OrderedDict(
            (k, RunningStats(s.mean.copy(), s.var.copy(), s.count)) for k, s in self.stats.items()
        )
        return ParamStore(self.config, dup(self.values), dup(self.adam_m), dup(self.adam_v), stats)

    def astype(self, dtype) -> "ParamStore":
        out = self.copy()
        for d in (out.values, out.adam_m, out.adam_v):
            for k in d:
                d[k] = d[k].astype(dtype)
        for s in out.stats.values():
            s.mean, s.var = s.mean.astype(dtype), s.var.astype(dtype)
        return out


class Network:
    """Static block graph for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        n, j = config.levels, config.rdb_depth
        chans = (1,) + config.channels
        policy = config.bn_policy

        def bn(first=False, last=False):
            if last or policy == "none":
                return False
            return not (first and policy == "standard")

        self.down_cb, self.down_rdb, self.up_rdb, self.up_cb = {}, {}, {}, {}
        for i in range(1, n + 1):
            self.down_cb[i] = ConvBlock(f"L{i}.down.cb",
                                        ConvBlockSpec(4 * chans[i - 1], chans[i], use_bn=bn(first=i == 1)))
            self.down_rdb[i] = RDB(f"L{i}.down.rdb", RDBSpec(chans[i], j, use_bn=bn()))
        self.top_cb = ConvBlock(f"L{n}.top.cb", self._tail_spec(chans[n], chans[n - 1], last=n == 1, bn=bn))
        for i in range(n - 1, 0, -1):
            self.up_rdb[i] = RDB(f"L{i}.up.rdb", RDBSpec(chans[i], j, use_bn=bn()))
            self.up_cb[i] = ConvBlock(f"L{i}.up.cb", self._tail_spec(chans[i], chans[i - 1], last=i == 1, bn=bn))
        self._check_junctions()

    @staticmethod
    def _tail_spec(c_in, c_prev, last, bn):
        if last:
            return ConvBlockSpec(c_in, 4 * c_prev, use_bn=False, use_relu=False)
        return ConvBlockSpec(c_in, 4 * c_prev, use_bn=bn())

    def _check_junctions(self):
        n = self.config.levels
        c_flow = 1
        for i in range(1, n + 1):
            if self.down_cb[i].spec.c_in != 4 * c_flow:
                raise ShapeError(f"level {i} down: conv block expects {self.down_cb[i].spec.c_in} "
                                 f"channels but DWT yields {4 * c_flow}")
            c_flow = self.down_cb[i].spec.c_out
            if self.down_rdb[i].spec.c != c_flow:
                raise ShapeError(f"level {i} down: RDB width {self.down_rdb[i].spec.c} != {c_flow}")
        for i in range(n - 1, 0, -1):
            producer = self.top_cb if i == n - 1 else self.up_cb[i + 1]
            if producer.spec.c_out % 4 or producer.spec.c_out // 4 != self.down_rdb[i].spec.c:
                raise ShapeError(f"level {i} up: iDWT yields {producer.spec.c_out // 4} channels, "
                                 f"skip from level {i} down has {self.down_rdb[i].spec.c}")
        last = self.up_cb[1] if n > 1 else self.top_cb
        if last.spec.c_out != 4 or last.spec.use_relu or last.spec.use_bn:
            raise ShapeError("level 1 up: final layer must be a bare conv producing 4 subbands")

    def blocks(self):
        """All blocks in forward execution order."""
        n = self.config.levels
        out = []
        for i in range(1, n + 1):
            out += [self.down_cb[i], self.down_rdb[i]]
        out.append(self.top_cb)
        for i in range(n - 1, 0, -1):
            out += [self.up_rdb[i], self.up_cb[i]]
        return out

    def param_shapes(self) -> OrderedDict:
        shapes = OrderedDict()
        for b in self.blocks():
            shapes.update(b.param_shapes())
        return shapes

    def stat_names(self) -> list[str]:
        return [s for b in self.blocks() for s in b.stat_names()]

    def conv_block_counts(self) -> dict[tuple[int, str], int]:
        """Conv blocks per (level, direction); the top level counts its turn block under 'down'.

        RDB fusion convs are plain layers and not counted.
        """
        n = self.config.levels
        counts = {}
        for i in range(1, n + 1):
            counts[(i, "down")] = 1 + len(self.down_rdb[i].conv_blocks)
        counts[(n, "down")] += 1
        for i in range(1, n):
            counts[(i, "up")] = len(self.up_rdb[i].conv_blocks) + 1
        return counts

    def forward(self, x, params, mode="infer", stats=None):
        check_tensor(x)
        n = self.config.levels
        if x.shape[1] != 1:
            raise ShapeError(f"network input must have 1 channel, got shape {x.shape}")
        if x.shape[2] % self.config.grid or x.shape[3] % self.config.grid:
            raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by {self.config.grid}; "
                             "use pad_to_grid first")
        caches = {}
        w = x
        skips = {}
        for i in range(1, n + 1):
            w = dwt(w)
            w, caches[("down_cb", i)] = self.down_cb[i].forward(w, params, mode, stats)
            w, caches[("down_rdb", i)] = self.down_rdb[i].forward(w, params, mode, stats)
            skips[i] = w
        w, caches["top"] = self.top_cb.forward(w, params, mode, stats)
        w = idwt(w)
        for i in range(n - 1, 0, -1):
            s = add(w, skips[i])
            s, caches[("up_rdb", i)] = self.up_rdb[i].forward(s, params, mode, stats)
            s, caches[("up_cb", i)] = self.up_cb[i].forward(s, params, mode, stats)
            w = idwt(s)
        return w, caches

    def backward(self, grad_out, caches, params):
        """Chain gradients in reverse block order; returns ``(grad_input, grads)``."""
        n = self.config.levels
        grads = {}
        g = grad_out
        skip_grads = {}
        for i in range(1, n):
            g = idwt_backward(g)
            g = self.up_cb[i].backward(g, caches[("up_cb", i)], params, grads)
            g = self.up_rdb[i].backward(g, caches[("up_rdb", i)], params, grads)
            skip_grads[i] = g
        g = idwt_backward(g)
        g = self.top_cb.backward(g, caches["top"], params, grads)
        for i in range(n, 0, -1):
            if i < n:
                g = g + skip_grads[i]
            g = self.down_rdb[i].backward(g, caches[("down_rdb", i)], params, grads)
            g = self.down_cb[i].backward(g, caches[("down_cb", i)], params, grads)
            g = dwt_backward(g)
        return g, grads


@functools.lru_cache(maxsize=None)
def network_for(config: ModelConfig) -> Network:
    return Network(config)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in network_for(config).param_shapes().values())


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Initialize weights N(0, 2/fan_in), biases 0, BN gamma 1 / beta 0."""
    net = network_for(config)
    rng = np.random.default_rng(seed)
    store = ParamStore(config)
    for name, shape in net.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".bn_gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.values[name] = value.astype(dtype)
        store.adam_m[name] = np.zeros(shape, dtype=dtype)
        store.adam_v[name] = np.zeros(shape, dtype=dtype)
    for name, shape in net.param_shapes().items():
        if name.endswith(".bn_gamma"):
            store.stats[name[: -len("_gamma")]] = RunningStats.empty(shape[0], dtype)
    return store


def forward(x: np.ndarray, params: ParamStore, mode: str = "infer",
            update_stats: bool = False) -> np.ndarray:
    """Run the network; returns the clean-image estimate with the input's shape."""
    net = network_for(params.config)
    stats = params.stats if (update_stats or mode == "infer") else None
    return net.forward(x, params.values, mode, stats)[0]


def loss_value(output: np.ndarray, target: np.ndarray) -> float:
    """(1/2N) * sum of squared errors over the batch."""
    d = output - target
    return float(0.5 * np.sum(d * d) / output.shape[0])


def loss_grad(output: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (output - target) / output.shape[0]


def backward(x: np.ndarray, target: np.ndarray, params: ParamStore, mode: str = "train",
             update_stats: bool = False):
    """Loss and gradients for every learnable tensor, ordered like ``params``."""
    if x.shape != target.shape:
        raise ShapeError(f"input shape {x.shape} and target shape {target.shape} differ")
    net = network_for(params.config)
    stats = params.stats if (update_stats or mode == "infer") else None
    out, caches = net.forward(x, params.values, mode, stats)
    loss = loss_value(out, target)
    _, grads = net.backward(loss_grad(out, target), caches, params.values)
    ordered = OrderedDict((k, grads[k]) for k in params.values)
    return loss, ordered


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_grid(x: np.ndarray, levels: int):
    """Reflect-pad bottom/right so height and width are multiples of 2**levels."""
    check_tensor(x)
    grid = 2 ** levels
    h, w = x.shape[2:]
    ph, pw = (-h) % grid, (-w) % grid
    if ph or pw:
        mode = "reflect" if h > 1 and w > 1 else "edge"
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return x, CropRecord(h, w)


def crop_back(y: np.ndarray, record: CropRecord) -> np.ndarray:
    return y[:, :, : record.height, : record.width]


def denoise(image: np.ndarray, params: ParamStore) -> np.ndarray:
    """Denoise one 2-D image of any size in infer mode."""
    x = np.asarray(image, dtype=params.dtype)[None, None]
    xp, rec = pad_to_grid(x, params.config.levels)
    return crop_back(forward(xp, params, "infer"), rec)[0, 0]
