"""Parameter containers: a small module system over :mod:`hrl.functional`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class. Attributes that are Tensors (requires_grad), Modules, or
    lists of Modules are discovered automatically; plain ndarray attributes
    and running statistics are buffers (saved, never trained)."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, F.RunningStats):
                yield f"{full}.mean", value.mean
                yield f"{full}.var", value.var
            elif isinstance(value, np.ndarray) and not name.startswith("_"):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        _cast_buffers(self, dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]


def _cast_buffers(module: Module, dtype) -> None:
    for name, value in list(vars(module).items()):
        if isinstance(value, F.RunningStats):
            value.mean = value.mean.astype(dtype)
            value.var = value.var.astype(dtype)
        elif isinstance(value, np.ndarray) and not name.startswith("_"):
            setattr(module, name, value.astype(dtype))
    for child in module.children():
        _cast_buffers(child, dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        self.weight = he_normal(rng, (cout, cin, kernel, kernel, kernel), cin * kernel**3, dtype)
        self.bias = zeros((cout,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = ones((channels,), dtype)
        self.beta = zeros((channels,), dtype)
        self.stats = F.RunningStats(channels, momentum, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.stats, self.training, self.eps)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.weight = he_normal(rng, (fan_out, fan_in), fan_in, dtype)
        self.bias = zeros((fan_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = ones((dim,), dtype)
        self.beta = zeros((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta, self.eps)
