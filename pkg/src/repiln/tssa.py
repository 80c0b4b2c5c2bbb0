"""Temporal-scale sparse attention.

Attention runs over time steps: scores form an ``L x L`` matrix with one row
per query step, and each row keeps only its top ``e`` percent before the
softmax.  Every output step is therefore a convex mix of value steps.
"""
from __future__ import annotations

from fractions import Fraction
from math import ceil
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv1d, Module
from .tensor import Tensor


def retained_count(e: float, L: int) -> int:
    """``max(1, ceil(e/100 * L))`` evaluated without float round-off."""
    if not 0 < e <= 100:
        raise ValueError(f"retention percentage must lie in (0, 100], got {e}")
    return max(1, ceil(Fraction(str(e)) * L / 100))


def temporal_scores(q: Tensor, k: Tensor, alpha: float) -> Tensor:
    """``S[t, s] = sum_c q[c, t] * k[c, s] / alpha``; rows are query steps."""
    if q.shape != k.shape:
        raise ValueError(f"query/key shape mismatch {q.shape} vs {k.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return T.scale(T.matmul(T.transpose(q), k), 1.0 / alpha)


def max_e_keep(s: np.ndarray, e: float) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row (ties go to the lower index)."""
    L = s.shape[-1]
    k = retained_count(e, L)
    kth = np.partition(s, L - k, axis=-1)[..., L - k:L - k + 1]
    above = s > kth
    tied = s == kth
    room = k - above.sum(axis=-1, keepdims=True)
    return above | (tied & (np.cumsum(tied, axis=-1) <= room))


def max_e_mask(s: Tensor, e: float) -> Tensor:
    """Keep the top ``e`` percent of each row; the rest become the masking sentinel."""
    if not np.all(np.isfinite(s.data)):
        raise FloatingPointError("attention scores are not finite")
    if e == 100:
        retained_count(e, s.shape[-1])
        return T.masked_fill(s, np.ones(s.shape, dtype=bool), 0.0)
    return T.masked_fill(s, max_e_keep(s.data, e), T.sentinel(s.dtype))


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, alpha: float, e: float) -> Tensor:
    a = T.softmax_rows(max_e_mask(temporal_scores(q, k, alpha), e))
    # out[c, t] = sum_s a[t, s] * v[c, s]
    return T.matmul(v, T.transpose(a))


class TSSA(Module):
    """Q/K/V come from a point conv followed by a depthwise kernel-3 conv each."""

    def __init__(self, channels: int, e: float = 50.0, alpha: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        if not 0 < e <= 100:
            raise ValueError(f"e must lie in (0, 100], got {e}")
        self.e = float(e)
        self.alpha = float(np.sqrt(channels)) if alpha is None else float(alpha)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        C = channels
        self.q_point = Conv1d(C, C, 1, rng=rng, dtype=dtype)
        self.q_depth = Conv1d(C, C, 3, padding=1, groups=C, rng=rng, dtype=dtype)
        self.k_point = Conv1d(C, C, 1, rng=rng, dtype=dtype)
        self.k_depth = Conv1d(C, C, 3, padding=1, groups=C, rng=rng, dtype=dtype)
        self.v_point = Conv1d(C, C, 1, rng=rng, dtype=dtype)
        self.v_depth = Conv1d(C, C, 3, padding=1, groups=C, rng=rng, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.q_point.out_channels

    def project_qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (self.q_depth(self.q_point(x)),
                self.k_depth(self.k_point(x)),
                self.v_depth(self.v_point(x)))

    def attention_weights(self, x: Tensor) -> Tensor:
        q, k, _ = self.project_qkv(x)
        return T.softmax_rows(max_e_mask(temporal_scores(q, k, self.alpha), self.e))

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = self.project_qkv(x)
        return sparse_attention(q, k, v, self.alpha, self.e)

    def attention_macs(self, L: int) -> int:
        """Score matrix plus value mix: ``C * L * L`` each."""
        return 2 * self.channels * L * L

    def macs(self, L: int) -> int:
        C = self.channels
        projections = 3 * (C * C * L + 3 * C * L)
        return projections + self.attention_macs(L)
