"""Parameter-holding layers built on the primitives in :mod:`ops`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Tree of named parameters and buffers with a train/eval switch.

    Children are found in instance attributes, including (nested) lists.
    Non-trainable arrays listed in ``buffer_names`` are saved with the state.
    """

    training = True
    buffer_names: tuple[str, ...] = ()

    def _children(self, prefix: str):
        def walk(value, path):
            if isinstance(value, Module):
                yield path, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from walk(item, f"{path}.{i}")

        for key, value in vars(self).items():
            yield from walk(value, prefix + key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
        for path, child in self._children(prefix):
            yield from child.named_parameters(path + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self.buffer_names:
            yield prefix + key, getattr(self, key)
        for path, child in self._children(prefix):
            yield from child.named_buffers(path + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children(""):
            yield from child.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, padding: int | None = None,
                 dtype=np.float32, init: str = "he"):
        fan_in = k * k * cin
        if init == "he":
            w = he_uniform(rng, (k, k, cin, cout), fan_in, dtype)
        else:
            w = xavier_uniform(rng, (k, k, cin, cout), fan_in, k * k * cout, dtype)
        self.kernel = parameter(w)
        self.bias = parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Deconv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 2, padding: int = 1, dtype=np.float32):
        # effective fan-in per output pixel is about k*k*cin / stride^2
        fan_in = max(1, k * k * cin // (stride * stride))
        self.kernel = parameter(he_uniform(rng, (k, k, cout, cin), fan_in, dtype))
        self.bias = parameter(np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.deconv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng, dtype=np.float32, init: str = "he"):
        if init == "he":
            w = he_uniform(rng, (fin, fout), fin, dtype)
        else:
            w = xavier_uniform(rng, (fin, fout), fin, fout, dtype)
        self.weights = parameter(w)
        self.bias = parameter(np.zeros(fout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weights, self.bias)


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.9, eps: float = 1e-5):
        self.scale = parameter(np.ones(channels, dtype=dtype))
        self.shift = parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.scale, self.shift, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """Convolution, batch normalization, ReLU."""

    def __init__(self, cin: int, cout: int, rng, k: int = 3, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, rng, dtype=dtype)
        self.bn = BatchNorm(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class DenseBlock(Module):
    """Fully connected layer, batch normalization, ReLU."""

    def __init__(self, fin: int, fout: int, rng, dtype=np.float32):
        self.fc = Linear(fin, fout, rng, dtype=dtype)
        self.bn = BatchNorm(fout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.fc(x)))
