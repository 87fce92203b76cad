"""Parameterised layers over the autodiff primitives."""

import math
from collections.abc import Iterator

import numpy as np

from h2dilr.autodiff import ops
from h2dilr.autodiff.tensor import Parameter, Tensor
from h2dilr.core.errors import CheckpointError

RELU_GAIN = math.sqrt(2.0)


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> np.ndarray:
    """N(0, gain^2 / fan_in) weights."""
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


class Module:
    """Container that discovers Parameters and sub-Modules from its attributes.

    Names are dotted attribute paths; list entries use their position.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Dotted-name, parameter pairs in registration order."""
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def name_parameters(self, prefix: str) -> None:
        """Stamp every Parameter with its full dotted name (used as the gradient key)."""
        for name, param in self.named_parameters(f"{prefix}."):
            param.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the matching parameters; names and shapes must agree."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"tensor '{name}': shape {value.shape} != expected {param.shape}")
            param.data = value.copy()

    def requires_grad_(self, flag: bool) -> "Module":
        for param in self.parameters():
            param.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "Module":
        """Set the training flag on this module and its children."""
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv1d(Module):
    """1-D convolution with "same"-style padding: total k - s, left half rounded down."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator, gain: float = RELU_GAIN):
        self.kernel = kernel
        self.stride = stride
        total = max(kernel - stride, 0)
        self.padding = (total // 2, total - total // 2)
        self.weight = Parameter(fan_in_normal(rng, (c_out, c_in, kernel), c_in * kernel, gain))
        self.bias = Parameter(np.zeros(c_out))

    def output_length(self, length: int) -> int:
        return ops.conv_output_length(length, self.kernel, self.stride, self.padding)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    """Transposed conv that mirrors a Conv1d's padding and crops to a requested length."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator, gain: float = RELU_GAIN):
        self.kernel = kernel
        self.stride = stride
        self.pad_left = max(kernel - stride, 0) // 2
        self.weight = Parameter(fan_in_normal(rng, (c_in, c_out, kernel), c_in * kernel, gain))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor, output_length: int) -> Tensor:
        return ops.conv_transpose1d(x, self.weight, self.bias, self.stride, self.pad_left, output_length)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Parameter(fan_in_normal(rng, (d_out, d_in), d_in, gain))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
