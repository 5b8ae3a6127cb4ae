"""Parameter-owning layers on top of :mod:`surfuse.ops`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base class that tracks parameters and submodules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _name_parameters(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in))
        self.bias = Parameter(_uniform(rng, (n_out,), n_in))

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, eps: float = 1e-5, channels_last: bool = False):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.channels_last = channels_last
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x) -> Tensor:
        return ops.group_norm(x, self.weight, self.bias, self.groups, self.eps, self.channels_last)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        stride: int,
        pad: int,
        rng: np.random.Generator,
        channels_last: bool = False,
    ):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.channels_last = channels_last
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in))

    def __call__(self, x) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.channels_last)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x, return_weights: bool = False):
        return ops.multi_head_attention(
            x,
            self.q.weight, self.q.bias,
            self.k.weight, self.k.bias,
            self.v.weight, self.v.bias,
            self.out.weight, self.out.bias,
            heads=self.heads,
            return_weights=return_weights,
        )


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]
