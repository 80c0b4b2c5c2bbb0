"""Dense tensors with a recording tape for reverse-mode differentiation.

Every op accepts either an unbatched ``(C, L)`` array or a batched ``(B, C, L)``
array where it makes sense; a leading batch axis is treated as an explicit
stack of independent samples, never as broadcasting.

Recording only happens while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse_loss(conv1d(x, w, b, padding=1), y)
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import contextvars
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Optional, Sequence

import numpy as np
from scipy import special

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "repiln_active_tape", default=None
)


class TapeError(RuntimeError):
    pass


def sentinel(dtype) -> float:
    """Most negative finite value of ``dtype``; stands in for -inf in masks."""
    return float(np.finfo(dtype).min)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # python scalars and lists default to 32-bit; arrays keep a float dtype
            keep = isinstance(data, np.ndarray) and arr.dtype in _DTYPES
            dtype = arr.dtype if keep else np.float32
        arr = np.asarray(arr, dtype=dtype, order="C")
        if arr.dtype not in _DTYPES:
            raise TypeError(f"unsupported element type {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise FloatingPointError(f"{what}: {bad} non-finite value(s)")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, all routed through the recorded ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class _Node:
    inputs: tuple
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so the list is already topologically
    sorted.  A tape runs backward once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._done = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, inputs, out, backward):
        if self._done:
            raise TapeError("tape already ran backward; reset() it before recording")
        out._tape = self
        self._nodes.append(_Node(tuple(inputs), out, backward))

    def reset(self):
        self._nodes = []
        self._done = False

    def leaves(self) -> list[Tensor]:
        seen, out = set(), []
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None):
        """Populate ``.grad`` on every leaf seen by the tape (and on ``params``)."""
        if self._done:
            raise TapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape (detached graph)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        targets = self.leaves()
        if params is not None:
            known = {id(t) for t in targets}
            targets += [p for p in params if id(p) not in known]
        for leaf in targets:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
        self._done = True


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None):
    if loss._tape is None:
        raise TapeError("loss has no recorded history (detached graph)")
    loss._tape.backward(loss, params)


def _make(data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    tape = _active_tape.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        tape._record(inputs, out, bwd)
    return out


def _same_dtype(*ts: Tensor):
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise TypeError(f"dtype mismatch: {d} vs {t.dtype}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _same_dtype(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    _same_dtype(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    _same_dtype(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = (0.5 * (1.0 + special.erf(xd / np.sqrt(2.0)))).astype(x.dtype)
    pdf = (np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)).astype(x.dtype)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu, "none": identity}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# reductions and losses

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_time(x: Tensor) -> Tensor:
    """Average over the last (temporal) axis."""
    n = x.shape[-1]
    out = x.data.mean(axis=-1)

    def bwd(g):
        return (np.repeat(g[..., None] / n, n, axis=-1).astype(x.dtype),)

    return _make(out, (x,), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse_loss")
    _same_dtype(pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    return _make(out, (pred, target), lambda g: (g * 2 * diff / n, -g * 2 * diff / n))


# ---------------------------------------------------------------------------
# linear algebra

def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ValueError(f"matmul: need matching 2D or batched 3D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: dim mismatch {a.shape} @ {b.shape}")
    _same_dtype(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(F,)`` or ``(B, F)``."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: shapes {x.shape}, {weight.shape}, {bias.shape} do not line up")
    _same_dtype(x, weight, bias)
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    # one row per stacked product so a row's result does not depend on the batch size
    out = (np.matmul(x2[:, None, :], wd.T)[:, 0, :] + bias.data).reshape(xd.shape[:-1] + (wd.shape[0],))

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        return (g2 @ wd).reshape(xd.shape), g2.T @ x2, g2.sum(axis=0)

    return _make(out, (x, weight, bias), bwd)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over the last axis.

    ``out[o, t] = bias[o] + sum_{i, j} weight[o, i, j] * xpad[g(o) * Cg + i, t * stride + j]``
    """
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or weight.ndim != 3:
        raise ValueError(f"conv1d: bad ranks input {x.shape}, weight {weight.shape}")
    xd = x.data if batched else x.data[None]
    B, C_in, L = xd.shape
    C_out, Cg, K = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("conv1d: need stride >= 1, padding >= 0, groups >= 1")
    if C_in % groups or C_out % groups or C_in // groups != Cg:
        raise ValueError(f"conv1d: channels {C_in}->{C_out} with groups={groups} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (C_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({C_out},)")
    L_out = (L + 2 * padding - K) // stride + 1
    if L_out < 1:
        raise ValueError(f"conv1d: empty output for L={L}, K={K}, stride={stride}, padding={padding}")
    ins = (x, weight) if bias is None else (x, weight, bias)
    _same_dtype(*ins)
    G, Cog = groups, C_out // groups
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    span = stride * (L_out - 1) + 1
    wd = weight.data

    if Cg == 1 and Cog == 1:
        # depthwise: plain elementwise taps keep results independent of batch size
        w2 = wd[:, 0, :]
        out = np.zeros((B, C_out, L_out), dtype=xd.dtype)
        for j in range(K):
            out += w2[None, :, j, None] * xp[:, :, j:j + span:stride]
        if bias is not None:
            out += bias.data[None, :, None]

        def bwd(g):
            gx = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for j in range(K):
                sl = xp[:, :, j:j + span:stride]
                gw[:, 0, j] = np.einsum("bcl,bcl->c", g, sl)
                gx[:, :, j:j + span:stride] += g * w2[None, :, j, None]
            return _finish(gx, gw, g)
    else:
        cols = np.stack([xp[:, :, j:j + span:stride] for j in range(K)], axis=2)  # B, C_in, K, L_out
        cols = cols.reshape(B, G, Cg * K, L_out)
        wmat = wd.reshape(G, Cog, Cg * K)
        out = np.matmul(wmat[None], cols).reshape(B, C_out, L_out)
        if bias is not None:
            out += bias.data[None, :, None]

        def bwd(g):
            g4 = g.reshape(B, G, Cog, L_out)
            gw = np.matmul(g4, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            gcols = np.matmul(np.swapaxes(wmat, -1, -2)[None], g4).reshape(B, C_in, K, L_out)
            gx = np.zeros_like(xp)
            for j in range(K):
                gx[:, :, j:j + span:stride] += gcols[:, :, j, :]
            return _finish(gx, gw, g)

    def _finish(gx, gw, g):
        if padding:
            gx = gx[:, :, padding:padding + L]
        if not batched:
            gx = gx[0]
        gx = np.asarray(gx, order="C")
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    if batched:
        return _make(out, ins, bwd)
    return _make(out[0], ins, lambda g: bwd(g[None]))


# ---------------------------------------------------------------------------
# attention primitives

def softmax_rows(s: Tensor) -> Tensor:
    """Softmax along the last axis; sentinel (most-negative finite) entries map to exactly 0."""
    sd = s.data
    sent = sentinel(s.dtype)
    masked = sd == sent
    if np.any(masked.all(axis=-1)):
        raise ValueError("softmax_rows: a row has every entry masked")
    m = np.max(sd, axis=-1, keepdims=True)
    with np.errstate(under="ignore", over="ignore"):
        e = np.exp(sd - m)
    e[masked] = 0
    a = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (a * (g - np.sum(g * a, axis=-1, keepdims=True)),)

    return _make(a, (s,), bwd)


def masked_fill(s: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False; gradient flows only through kept entries."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != s.shape:
        raise ValueError(f"masked_fill: mask shape {keep.shape} != {s.shape}")
    out = np.where(keep, s.data, s.dtype.type(value))
    return _make(out, (s,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# normalization

def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None] if ndim == 3 else v[:, None]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
               eps: float) -> Tensor:
    """Per-channel affine normalization with fixed statistics (inference mode)."""
    _same_dtype(x, gamma, beta)
    inv = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(x.dtype)
    xhat = (x.data - _channel_view(mean.astype(x.dtype), x.ndim)) * _channel_view(inv, x.ndim)
    out = xhat * _channel_view(gamma.data, x.ndim) + _channel_view(beta.data, x.ndim)
    axes = (0, 2) if x.ndim == 3 else (1,)

    def bwd(g):
        return (g * _channel_view(gamma.data * inv, x.ndim), (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make(out, (x, gamma, beta), bwd)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize with statistics over the batch and time axes.

    Returns ``(out, batch_mean, batch_var)`` with the biased variance.
    """
    _same_dtype(x, gamma, beta)
    xd = x.data if x.ndim == 3 else x.data[None]
    n = xd.shape[0] * xd.shape[2]
    mu = xd.mean(axis=(0, 2))
    var = xd.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xd - mu[None, :, None]) * inv[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def bwd(g):
        g3 = g if x.ndim == 3 else g[None]
        dxhat = g3 * gamma.data[None, :, None]
        dx = (inv[None, :, None] / n) * (
            n * dxhat - dxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
        )
        return (dx if x.ndim == 3 else dx[0], (g3 * xhat).sum(axis=(0, 2)), g3.sum(axis=(0, 2)))

    res = _make(out if x.ndim == 3 else out[0], (x, gamma, beta), bwd)
    return res, mu, var, n


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative gap between tape gradients of scalar ``f`` and central differences.

    Error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if x.dtype != np.float64:
        raise TypeError("finite_diff_check runs in float64 only")
    leaf = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        y = f(leaf)
    y.check_finite("f(x)")
    if y._tape is tape:
        tape.backward(y, params=[leaf])
        analytic = leaf.grad
    else:
        analytic = np.zeros_like(leaf.data)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("analytic gradient has non-finite entries")

    flat = leaf.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(leaf.data.copy(), dtype=np.float64)).item()
        flat[i] = orig - h
        fm = f(Tensor(leaf.data.copy(), dtype=np.float64)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
    if not np.all(np.isfinite(numeric)):
        raise FloatingPointError("finite differences hit non-finite values")
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / (np.abs(a) + 1e-8)))


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"RPT1"
_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_OF = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, t) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODE:
        raise TypeError(f"cannot serialize dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _CODE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    start = fh.tell() if fh.seekable() else -1
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what} at offset {start}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> Tensor:
    off = fh.tell() if fh.seekable() else -1
    magic = _read_exact(fh, 4, "tensor header")
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at offset {off}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
    if code not in _DTYPE_OF:
        raise FormatError(f"unknown element type {code} at offset {off + 4}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor shape"))
    dt = _DTYPE_OF[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * dt.itemsize, "tensor data")
    arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return Tensor(arr, dtype=arr.dtype)


def tensor_to_bytes(t) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> Tensor:
    fh = io.BytesIO(raw)
    t = read_tensor(fh)
    if fh.read(1):
        raise FormatError(f"trailing bytes after tensor at offset {fh.tell() - 1}")
    return t


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
