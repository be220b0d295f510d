"""Parameterized layers built on the autodiff ops.

Modules register parameters, buffers, and children explicitly so the
traversal order (and therefore checkpoint naming, SGD update order, and
gradient statistics ordering) is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    def __init__(self):
        self.training = True
        self._children: list[tuple[str, "Module"]] = []
        self._params: list[tuple[str, Tensor]] = []
        self._buffers: list[tuple[str, np.ndarray]] = []

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children.append((name, child))
        return child

    def add_param(self, name: str, value: Tensor) -> Tensor:
        value.requires_grad = True
        value.name = name
        self._params.append((name, value))
        return value

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers.append((name, value))
        return value

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params:
            yield (prefix + name, p)
        for cname, child in self._children:
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers:
            yield (prefix + name, b)
        for cname, child in self._children:
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children:
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_param("weight", Tensor(kaiming_normal(rng, (in_features, out_features), in_features)))
        self.bias = self.add_param("bias", Tensor(np.zeros(out_features, dtype=np.float32))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def macs(self) -> int:
        return self.in_features * self.out_features


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param("weight", Tensor(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in)))
        # Set by the model builder once input resolution is known.
        self.out_hw: tuple[int, int] | None = None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        self.out_hw = (out.shape[2], out.shape[3])
        return out

    def macs(self) -> int:
        if self.out_hw is None:
            raise RuntimeError("output resolution not recorded; build the model first")
        ho, wo = self.out_hw
        return self.out_ch * ho * wo * self.in_ch * self.kernel * self.kernel


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", Tensor(np.ones(channels, dtype=np.float32)))
        self.beta = self.add_param("beta", Tensor(np.zeros(channels, dtype=np.float32)))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)

    def macs(self) -> int:
        return 0


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        self.mods = list(mods)
        for i, m in enumerate(self.mods):
            self.add_child(str(i), m)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.mods:
            x = m(x)
        return x


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)

    def macs(self) -> int:
        return 0


def to_f64(module: Module) -> Module:
    """Cast all parameters and buffers to float64 in place (for gradient checks)."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    _cast_buffers(module, np.float64)
    return module


def _cast_buffers(module: Module, dtype) -> None:
    for i, (name, buf) in enumerate(module._buffers):
        cast = buf.astype(dtype)
        module._buffers[i] = (name, cast)
        if getattr(module, name, None) is buf:
            setattr(module, name, cast)
    for _, child in module._children:
        _cast_buffers(child, dtype)
