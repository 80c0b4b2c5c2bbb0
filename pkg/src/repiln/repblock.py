"""Reparameterizable conv block.

Training form sums a kernel-3 branch, a kernel-1 branch and (when shapes allow)
an identity branch, each optionally followed by its own norm layer.  Because
every branch is linear in inference mode, the sum folds into one kernel-3
convolution; :meth:`RepBlock.fuse` performs that fold.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm1d, Conv1d, Module, param
from .tensor import Tensor


class RepBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, norm: bool = True,
                 activation: str = "relu", rng: Optional[np.random.Generator] = None, dtype=np.float32):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.activation = activation
        self.has_identity = in_channels == out_channels and stride == 1
        # kernel-1 branch uses padding 0 so its taps land on the kernel-3 centre taps
        self.conv3 = Conv1d(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng, dtype=dtype)
        self.conv1 = Conv1d(in_channels, out_channels, 1, stride=stride, padding=0, rng=rng, dtype=dtype)
        self.norm3 = BatchNorm1d(out_channels, dtype=dtype) if norm else None
        self.norm1 = BatchNorm1d(out_channels, dtype=dtype) if norm else None
        self.norm_id = BatchNorm1d(out_channels, dtype=dtype) if norm and self.has_identity else None

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    def branch_sum(self, x: Tensor) -> Tensor:
        y = self.conv3(x)
        if self.norm3 is not None:
            y = self.norm3(y)
        z = self.conv1(x)
        if self.norm1 is not None:
            z = self.norm1(z)
        y = T.add(y, z)
        if self.has_identity:
            y = T.add(y, self.norm_id(x) if self.norm_id is not None else x)
        return y

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(self.branch_sum(x), self.activation)

    def fused_kernel(self) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent kernel-3 weight and bias, computed in float64."""
        C_out, C_in = self.out_channels, self.in_channels
        W = np.zeros((C_out, C_in, 3))
        b = np.zeros(C_out)

        def folded(norm):
            if norm is None:
                return np.ones(C_out), np.zeros(C_out)
            return norm.fold()

        s, t = folded(self.norm3)
        W += self.conv3.weight.data.astype(np.float64) * s[:, None, None]
        b += self.conv3.bias.data.astype(np.float64) * s + t

        s, t = folded(self.norm1)
        W[:, :, 1] += self.conv1.weight.data[:, :, 0].astype(np.float64) * s[:, None]
        b += self.conv1.bias.data.astype(np.float64) * s + t

        if self.has_identity:
            s, t = folded(self.norm_id)
            idx = np.arange(C_out)
            W[idx, idx, 1] += s
            b += t
        return W, b

    def fuse(self) -> "FusedRepBlock":
        W, b = self.fused_kernel()
        dtype = self.conv3.weight.dtype
        return FusedRepBlock(W.astype(dtype), b.astype(dtype), self.stride, self.activation)


class FusedRepBlock(Module):
    """Single kernel-3 convolution produced by :meth:`RepBlock.fuse`."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1, activation: str = "relu"):
        if weight.ndim != 3 or weight.shape[2] != 3:
            raise ValueError(f"fused kernel must have size 3, got weight shape {weight.shape}")
        self.stride = stride
        self.activation = activation
        self.weight = param(weight, weight.dtype)
        self.bias = param(bias, weight.dtype)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def branch_sum(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(self.branch_sum(x), self.activation)

    @classmethod
    def empty(cls, in_channels: int, out_channels: int, stride: int, activation: str, dtype):
        return cls(np.zeros((out_channels, in_channels, 3), dtype=dtype),
                   np.zeros(out_channels, dtype=dtype), stride, activation)


def fuse(block: RepBlock) -> FusedRepBlock:
    return block.fuse()
