"""Sparse-attention gated convolutional unit.

A local gate (point conv, depthwise kernel-3 conv, activation) multiplies the
output of the sparse temporal attention branch; a point conv maps back to the
input width.  The block residual is added by the caller.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm1d, Conv1d, Module
from .tensor import Tensor
from .tssa import TSSA


class SAGCU(Module):
    def __init__(self, channels: int, expansion: float = 1.0, gate_activation: str = "sigmoid",
                 e: float = 50.0, alpha: Optional[float] = None, prenorm: bool = False,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if gate_activation not in T.ACTIVATIONS:
            raise ValueError(f"unknown gate activation {gate_activation!r}")
        hidden = max(1, int(round(channels * expansion)))
        self.gate_activation = gate_activation
        self.norm = BatchNorm1d(channels, dtype=dtype) if prenorm else None
        self.gate_point = Conv1d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.gate_depth = Conv1d(hidden, hidden, 3, padding=1, groups=hidden, rng=rng, dtype=dtype)
        self.value_point = Conv1d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.tssa = TSSA(hidden, e=e, alpha=alpha, rng=rng, dtype=dtype)
        self.out_point = Conv1d(hidden, channels, 1, rng=rng, dtype=dtype)

    @property
    def hidden(self) -> int:
        return self.gate_point.out_channels

    def gate(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return T.activation(self.gate_depth(self.gate_point(x)), self.gate_activation)

    def value(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        return self.tssa(self.value_point(x))

    def forward(self, x: Tensor) -> Tensor:
        if self.norm is not None:
            x = self.norm(x)
        g = T.activation(self.gate_depth(self.gate_point(x)), self.gate_activation)
        v = self.tssa(self.value_point(x))
        return self.out_point(T.mul(g, v))

    def macs(self, L: int) -> int:
        C, H = self.out_point.out_channels, self.hidden
        total = 2 * C * H * L + 3 * H * L + self.tssa.macs(L) + H * L + H * C * L
        if self.norm is not None:
            total += C * L
        return total
