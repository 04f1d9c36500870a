"""Parameterized layers built on the op kernels."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .core import Parameter, Tensor, forward_op, get_default_dtype


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    # ReLU gain sqrt(2): bound = sqrt(6 / fan_in)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


class Module:
    """Container with named parameters, buffers and a training flag."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in getattr(self, "_buffers", {}).items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def assign_names(self, prefix: str) -> None:
        for name, p in self.named_parameters(f"{prefix}."):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride, padding, rng, bias=False,
                 layout="ncl"):
        super().__init__()
        self.stride, self.padding, self.layout = stride, padding, layout
        fan_in = in_channels * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          layout=self.layout)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, get_default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm1d(Module):
    def __init__(self, num_features, eps=1e-5, momentum=0.1, layout="ncl"):
        super().__init__()
        dtype = get_default_dtype()
        self.eps, self.momentum, self.layout = eps, momentum, layout
        self.weight = Parameter(np.ones(num_features, dtype))
        self.bias = Parameter(np.zeros(num_features, dtype))
        self._buffers = {
            "running_mean": np.zeros(num_features, dtype),
            "running_var": np.ones(num_features, dtype),
        }

    def forward(self, x: Tensor) -> Tensor:
        attrs = {
            "eps": self.eps,
            "momentum": self.momentum,
            "training": self.training,
            "layout": self.layout,
            "running_mean": self._buffers["running_mean"],
            "running_var": self._buffers["running_var"],
        }
        return forward_op("batchnorm1d", [x, self.weight, self.bias], attrs)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)


class MaxPool1d(Module):
    def __init__(self, kernel, stride, padding, layout="ncl"):
        super().__init__()
        self.kernel, self.stride, self.padding, self.layout = kernel, stride, padding, layout

    def forward(self, x: Tensor) -> Tensor:
        return ops.maxpool1d(x, kernel=self.kernel, stride=self.stride, padding=self.padding,
                             layout=self.layout)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
