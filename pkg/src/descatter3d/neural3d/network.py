"""Residual 3D encoder-decoder with explicit backward passes."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ShapeError
from . import ops


@dataclass(frozen=True)
class NetworkConfig:
    n_stages: int = 2
    base_channels: int = 8
    convs_per_stage: int = 2
    input_dims: tuple[int, int, int] = (32, 32, 16)
    residual: bool = True

    def __post_init__(self):
        if self.n_stages < 1:
            raise ShapeError("n_stages must be >= 1")
        if self.base_channels < 1:
            raise ShapeError("base_channels must be >= 1")
        if self.convs_per_stage not in (2, 3):
            raise ShapeError("convs_per_stage must be 2 or 3")
        f = 2 ** self.n_stages
        if any(n % f for n in self.input_dims):
            raise ShapeError(f"input dims {self.input_dims} must be divisible by 2**n_stages = {f}")

    @classmethod
    def full_scale(cls) -> "NetworkConfig":
        return cls(n_stages=4, base_channels=16, convs_per_stage=2, input_dims=(128, 128, 64))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_dims"] = tuple(d["input_dims"])
        return cls(**d)


class Conv3d:
    def __init__(self, name, in_c, out_c, k=3, bias=True):
        self.name = name
        self.pad = (k - 1) // 2
        self.weight = np.zeros((out_c, in_c, k, k, k), dtype=np.float32)
        self.bias = np.zeros(out_c, dtype=np.float32) if bias else None
        self._x = None
        self._cols = None

    def params(self):
        yield f"{self.name}.weight", self, "weight"
        if self.bias is not None:
            yield f"{self.name}.bias", self, "bias"

    def forward(self, x, train):
        if not train:
            return ops.conv3d_forward(x, self.weight, self.bias, self.pad)
        self._x = x
        out, self._cols = ops.conv3d_forward(x, self.weight, self.bias, self.pad, return_cols=True)
        return out

    def backward(self, g, grads):
        gx, gw, gb = ops.conv3d_backward(self._x, self.weight, g, self.pad, cols=self._cols)
        grads[f"{self.name}.weight"] = gw
        if self.bias is not None:
            grads[f"{self.name}.bias"] = gb.astype(self.bias.dtype)
        self._x = self._cols = None
        return gx


class BatchNorm3d:
    def __init__(self, name, c):
        self.name = name
        self.gamma = np.ones(c, dtype=np.float32)
        self.beta = np.zeros(c, dtype=np.float32)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self._cache = None

    def params(self):
        yield f"{self.name}.gamma", self, "gamma"
        yield f"{self.name}.beta", self, "beta"

    def stats(self):
        yield f"{self.name}.running_mean", self, "running_mean"
        yield f"{self.name}.running_var", self, "running_var"

    def forward(self, x, train):
        y, cache = ops.batchnorm3d_forward(x, self.gamma, self.beta, self.running_mean, self.running_var, train)
        if train:
            self._cache = cache
        return y

    def backward(self, g, grads):
        gx, gg, gb = ops.batchnorm3d_backward(g, self.gamma, self._cache)
        grads[f"{self.name}.gamma"] = gg
        grads[f"{self.name}.beta"] = gb
        self._cache = None
        return gx


class Block:
    """conv -> batch norm -> ReLU"""

    def __init__(self, name, in_c, out_c):
        self.conv = Conv3d(f"{name}.conv", in_c, out_c, bias=False)
        self.bn = BatchNorm3d(f"{name}.bn", out_c)
        self._pre = None

    def layers(self):
        return [self.conv, self.bn]

    def forward(self, x, train):
        pre = self.bn.forward(self.conv.forward(x, train), train)
        if train:
            self._pre = pre
        return ops.relu(pre)

    def backward(self, g, grads):
        g = ops.relu_backward(g, self._pre)
        self._pre = None
        return self.conv.backward(self.bn.backward(g, grads), grads)


class ConvTranspose3d:
    def __init__(self, name, in_c, out_c):
        self.name = name
        self.weight = np.zeros((in_c, out_c, 2, 2, 2), dtype=np.float32)
        self.bias = np.zeros(out_c, dtype=np.float32)
        self._x = None

    def params(self):
        yield f"{self.name}.weight", self, "weight"
        yield f"{self.name}.bias", self, "bias"

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.convtranspose3d_forward(x, self.weight, self.bias)

    def backward(self, g, grads):
        gx, gw, gb = ops.convtranspose3d_backward(self._x, self.weight, g)
        grads[f"{self.name}.weight"] = gw
        grads[f"{self.name}.bias"] = gb.astype(self.bias.dtype)
        self._x = None
        return gx


def _run(blocks, x, train):
    for b in blocks:
        x = b.forward(x, train)
    return x


def _back(blocks, g, grads):
    for b in reversed(blocks):
        g = b.backward(g, grads)
    return g


class Network:
    """Encoder/decoder with concatenation skips and a long residual connection.

    Built by :func:`build_network`; parameters are reachable by name through
    :meth:`parameters` in a fixed manifest order.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        n, base, m = config.n_stages, config.base_channels, config.convs_per_stage
        self.encoders, self.decoders, self.ups = [], [], []
        in_c = 1
        for s in range(1, n + 1):
            c = base * 2 ** (s - 1)
            blocks = [Block(f"enc{s}.{i + 1}", in_c if i == 0 else c, c) for i in range(m)]
            self.encoders.append(blocks)
            in_c = c
        c_mid = base * 2 ** n
        self.middle = [Block(f"mid.{i + 1}", in_c if i == 0 else c_mid, c_mid) for i in range(m)]
        below = c_mid
        for s in range(n, 0, -1):
            c = base * 2 ** (s - 1)
            self.ups.append(ConvTranspose3d(f"dec{s}.up", below, c))
            self.decoders.append([Block(f"dec{s}.{i + 1}", 2 * c if i == 0 else c, c) for i in range(m)])
            below = c
        self.final = Conv3d("final", base, 1, k=1, bias=True)
        self.mode = "train"
        self._pool_idx = []

    # -- parameter plumbing --

    def _all_layers(self):
        for blocks in self.encoders:
            for b in blocks:
                yield from b.layers()
        for b in self.middle:
            yield from b.layers()
        for up, blocks in zip(self.ups, self.decoders):
            yield up
            for b in blocks:
                yield from b.layers()
        yield self.final

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(layer, attr) for layer in self._all_layers() for name, layer, attr in layer.params()}

    def running_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._all_layers():
            if isinstance(layer, BatchNorm3d):
                for name, lay, attr in layer.stats():
                    out[name] = getattr(lay, attr)
        return out

    def _slots(self, stats=False):
        for layer in self._all_layers():
            yield from layer.params()
            if stats and isinstance(layer, BatchNorm3d):
                yield from layer.stats()

    def set_tensor(self, name: str, value: np.ndarray) -> None:
        for n, layer, attr in self._slots(stats=True):
            if n == name:
                cur = getattr(layer, attr)
                if cur.shape != value.shape:
                    raise ShapeError(f"{name}: expected shape {cur.shape}, got {value.shape}")
                setattr(layer, attr, np.array(value, dtype=cur.dtype))
                return
        raise KeyError(name)

    def astype(self, dtype) -> "Network":
        """Cast every parameter and running statistic in place."""
        for _, layer, attr in self._slots(stats=True):
            setattr(layer, attr, getattr(layer, attr).astype(dtype))
        return self

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    # -- passes --

    def forward(self, x: np.ndarray, train: bool | None = None) -> np.ndarray:
        """Map a (B, 1, X, Y, Z) batch to the de-scattered batch of the same shape.

        Train mode caches activations for :meth:`backward` and updates batch
        norm running statistics; eval mode is a pure function.
        """
        train = self.mode == "train" if train is None else train
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(self.config.input_dims):
            raise ShapeError(f"expected input (B, 1, {self.config.input_dims}), got {x.shape}")
        skips, pool_idx = [], []
        h = x
        for blocks in self.encoders:
            h = _run(blocks, h, train)
            skips.append(h)
            h, idx = ops.maxpool3d(h)
            pool_idx.append(idx)
        h = _run(self.middle, h, train)
        for up, blocks, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = np.concatenate([skip, up.forward(h, train)], axis=1)
            h = _run(blocks, h, train)
        out = self.final.forward(h, train)
        if train:
            self._pool_idx = pool_idx
        if self.config.residual:
            out = out + x
        return out

    def backward(self, grad_out: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate through the last train-mode forward.

        Returns (parameter gradients by name, gradient w.r.t. the input).
        """
        grads: dict[str, np.ndarray] = {}
        g_in = grad_out if self.config.residual else np.zeros_like(grad_out)
        g = self.final.backward(grad_out, grads)
        skip_grads = []
        for up, blocks in reversed(list(zip(self.ups, self.decoders))):
            g = _back(blocks, g, grads)
            c = g.shape[1] // 2
            skip_grads.append(g[:, :c])
            g = up.backward(np.ascontiguousarray(g[:, c:]), grads)
        g = _back(self.middle, g, grads)
        for blocks, idx, g_skip in zip(reversed(self.encoders), reversed(self._pool_idx), reversed(skip_grads)):
            g = ops.maxpool3d_backward(g, idx) + g_skip
            g = _back(blocks, g, grads)
        self._pool_idx = []
        params = self.parameters()
        return {k: grads[k] for k in params}, g_in + g


def build_network(config: NetworkConfig, init_seed: int = 0) -> Network:
    """Construct the network with He-normal weights and a zero final 1x1x1 conv."""
    net = Network(config)
    rng = np.random.default_rng(init_seed)
    for layer in net._all_layers():
        if layer is net.final:
            continue
        if isinstance(layer, Conv3d):
            fan_in = layer.weight[0].size
            layer.weight = (rng.standard_normal(layer.weight.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif isinstance(layer, ConvTranspose3d):
            fan_in = layer.weight.shape[0]
            layer.weight = (rng.standard_normal(layer.weight.shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return net

