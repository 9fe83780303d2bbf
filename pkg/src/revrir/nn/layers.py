"""Layers built on :class:`Tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


class Module:
    """Parameter container with train/eval mode.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain arrays listed in ``_buffers``. Child modules are found by walking
    attributes (lists of modules included), in definition order.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise ValidationError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValidationError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.copy()
        for name in buffers:
            owner, attr = self._resolve(name)
            current = getattr(owner, attr)
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != np.shape(current):
                raise ValidationError(f"{name}: shape {value.shape} does not match {np.shape(current)}")
            setattr(owner, attr, value.copy())

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        *path, attr = dotted.split(".")
        owner = self
        i = 0
        while i < len(path):
            value = getattr(owner, path[i])
            if isinstance(value, (list, tuple)):
                value = value[int(path[i + 1])]
                i += 1
            owner = value
            i += 1
        return owner, attr

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(xavier_uniform(in_features, out_features, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValidationError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        return x @ self.weight + self.bias


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta_shift = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps

    def normalize(self, x: Tensor) -> Tensor:
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValidationError("batch norm in train mode needs a batch of at least 2")
            mean = x.mean(axis=0, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=0, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data[0]
            self.running_var = (1 - m) * self.running_var + m * var.data[0] * n / (n - 1)
            return centered / (var + self.eps).sqrt()
        return (x - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))

    def forward(self, x: Tensor) -> Tensor:
        return self.normalize(x) * self.gamma + self.beta_shift


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * (keep / (1.0 - self.rate))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def ff_block(in_features: int, out_features: int, rng: np.random.Generator) -> Sequential:
    """Linear -> ReLU -> BatchNorm."""
    return Sequential(Linear(in_features, out_features, rng), ReLU(), BatchNorm1d(out_features))
