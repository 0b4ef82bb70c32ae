"""Parameter containers, layer modules, the AdamW optimizer, and checkpoints."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    ConfigurationError,
    Tensor,
    add,
    conv2d,
    gelu,
    layer_norm,
    matmul,
)

CHECKPOINT_FORMAT_VERSION = 1


class Parameter(Tensor):
    """A trainable tensor with a hierarchical name and a freeze switch."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False

    def freeze(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False


class Module:
    """Base class with attribute-order parameter registration.

    Child modules and parameters are discovered by walking ``__dict__`` in
    insertion order, so naming is stable and deterministic. Lists of modules
    are supported for block stacks.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def count_parameters(model: Module) -> int:
    """Total number of scalar parameters in a model."""
    return sum(p.data.size for p in model.parameters())


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2.0 * std, 2.0 * std)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Parameter(_trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        fan_in = in_channels * kernel_size * kernel_size
        std = math.sqrt(2.0 / fan_in)
        self.weight = Parameter(
            rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)


class Mlp(Module):
    """Two-layer feed-forward sublayer with GELU."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if lr < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            mhat = self._m[i] / (1.0 - b1 ** self.t)
            vhat = self._v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def save_checkpoint(path, model: Module):
    """Write all named parameters as little-endian float64 arrays with a version tag."""
    arrays = {"__format_version__": np.asarray([CHECKPOINT_FORMAT_VERSION], dtype="<i8")}
    for name, p in model.named_parameters():
        if name in arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        arrays[name] = np.ascontiguousarray(p.data, dtype="<f8")
    np.savez(path, **arrays)


def load_checkpoint(path, model: Module):
    """Load parameters by name; names and shapes must match the model exactly."""
    with np.load(path) as blob:
        version = int(blob["__format_version__"][0])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        stored = {k: blob[k] for k in blob.files if k != "__format_version__"}
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(stored))
    extra = sorted(set(stored) - set(model_params))
    if missing or extra:
        raise ValueError(f"checkpoint/model mismatch; missing={missing[:5]} extra={extra[:5]}")
    for name, p in model_params.items():
        if stored[name].shape != p.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {stored[name].shape} vs model {p.data.shape}")
        p.data = stored[name].astype(np.float64)
