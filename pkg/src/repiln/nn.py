"""Parameter containers: a tiny ``Module`` base plus conv, linear and norm layers."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters (grad-tracked tensors) and buffers."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            else:
                yield full, value

    def named_parameters(self, prefix: str = ""):
        return [(n, t) for n, t in self.named_tensors(prefix) if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        return [(n, t) for n, t in self.named_tensors(prefix) if not t.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_tensors())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in mine.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.asarray(arr, dtype=t.dtype, order="C")

    def astype(self, dtype) -> "Module":
        """Convert every tensor in place; returns ``self``."""
        for _, t in self.named_tensors():
            t.data = np.asarray(t.data, dtype=dtype, order="C")
            t.grad = None
        return self

    @property
    def dtype(self):
        for _, t in self.named_tensors():
            return t.dtype
        return np.dtype(np.float32)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    # kaiming-uniform with negative slope sqrt(5): bound = 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, dtype=dtype)


def buffer(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), dtype=dtype)


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (in_channels // groups) * kernel_size
        shape = (out_channels, in_channels // groups, kernel_size)
        self.weight = param(kaiming_uniform(rng, shape, fan_in, dtype), dtype)
        self.bias = param(np.zeros(out_channels), dtype)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def macs(self, L_out: int) -> int:
        C_out, Cg, K = self.weight.shape
        return C_out * Cg * K * L_out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = param(kaiming_uniform(rng, (out_features, in_features), in_features, dtype), dtype)
        self.bias = param(np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm1d(Module):
    """Per-channel norm; batch statistics over (batch, time) while training."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.eps, self.momentum = eps, momentum
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)
        self.running_mean = buffer(np.zeros(channels), dtype)
        self.running_var = buffer(np.ones(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return T.batch_norm(x, self.gamma, self.beta, self.running_mean.data,
                                self.running_var.data, self.eps)
        out, mu, var, n = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
        unbiased = var * (n / max(n - 1, 1))
        m = self.momentum
        self.running_mean.data = ((1 - m) * self.running_mean.data + m * mu).astype(x.dtype)
        self.running_var.data = ((1 - m) * self.running_var.data + m * unbiased).astype(x.dtype)
        return out

    def fold(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, shift) of the inference-mode affine map, in float64."""
        var = self.running_var.data.astype(np.float64)
        if np.any(var <= 0):
            raise ValueError("running variance must be positive to fold a norm layer")
        s = self.gamma.data.astype(np.float64) / np.sqrt(var + self.eps)
        return s, self.beta.data.astype(np.float64) - self.running_mean.data.astype(np.float64) * s
