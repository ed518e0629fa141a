"""Layer containers with named parameters and per-layer cost accounting."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigurationError
from .tensor import Tensor, parameter


class Module:
    """Base class: every ``Tensor`` attribute is a parameter.

    Child modules may be stored directly or in lists; dotted names follow
    attribute order, e.g. ``body.0.blocks.1.mixer.out_proj.U``.
    """

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, list):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + key + ".")

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    # accounting hooks, overridden by leaf layers
    kind: str = "module"

    def param_formula(self) -> Optional[int]:
        """Closed-form parameter count for leaf layers, ``None`` for containers."""
        return None

    def flops(self, positions: int) -> int:
        """Multiply-accumulate FLOPs (2 per MAC) for ``positions`` output positions."""
        return 0


def uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` of shape (d_in, d_out)."""

    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        if d_in < 1 or d_out < 1:
            raise ConfigurationError(f"Linear dims must be positive, got {d_in}x{d_out}")
        self.d_in, self.d_out = d_in, d_out
        bound = math.sqrt(1.0 / d_in)
        self.weight = parameter(uniform(rng, bound, (d_in, d_out), dtype))
        self.bias = parameter(uniform(rng, bound, (d_out,), dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def param_formula(self) -> int:
        return linear_params(self.d_in, self.d_out, self.bias is not None)

    def flops(self, positions: int) -> int:
        return 2 * self.d_in * self.d_out * positions


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    """Parameters of a dense layer: d_in * d_out weights plus d_out biases."""
    return d_in * d_out + (d_out if bias else 0)


class Conv2d(Module):
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        if kernel % 2 == 0:
            raise ConfigurationError(f"conv kernel must be odd, got {kernel}")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        bound = math.sqrt(1.0 / (c_in * kernel * kernel))
        self.weight = parameter(uniform(rng, bound, (c_out, c_in, kernel, kernel), dtype))
        self.bias = parameter(uniform(rng, bound, (c_out,), dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.kernel // 2)

    def param_formula(self) -> int:
        return self.c_in * self.c_out * self.kernel ** 2 + (self.c_out if self.bias is not None else 0)

    def flops(self, positions: int) -> int:
        return 2 * self.c_in * self.c_out * self.kernel ** 2 * positions


class LayerNorm(Module):
    kind = "norm"

    def __init__(self, dim: int, dtype=np.float32):
        self.dim = dim
        self.weight = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)

    def param_formula(self) -> int:
        return 2 * self.dim


class DepthwiseConv1d(Module):
    """Causal per-channel convolution over the token axis of (..., L, C)."""

    kind = "depthwise"

    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        self.channels, self.kernel = channels, kernel
        bound = math.sqrt(1.0 / kernel)
        self.weight = parameter(uniform(rng, bound, (channels, kernel), dtype))
        self.bias = parameter(uniform(rng, bound, (channels,), dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.causal_depthwise_conv1d(x, self.weight, self.bias)

    def param_formula(self) -> int:
        return self.channels * self.kernel + self.channels

    def flops(self, positions: int) -> int:
        return 2 * self.channels * self.kernel * positions
