"""Full network: stem RepBlock, staged RepILN blocks, tail RepBlock, MLP velocity head."""
from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .config import ModelConfig
from .gcu import SAGCU
from .nn import BatchNorm1d, Linear, Module
from .repblock import FusedRepBlock, RepBlock
from .tensor import FormatError, Tensor

TRAIN, DEPLOY = "train", "deploy"


@dataclass
class InputStats:
    """Per-channel standardization constants learned from the training windows."""

    mean: np.ndarray
    std: np.ndarray


class RepILNBlock(Module):
    """``x1 = rep(x)``, ``x2 = x1 + gcu(x1)``, plus ``x`` again when the shapes agree."""

    def __init__(self, rep, gcu: SAGCU):
        self.rep = rep
        self.gcu = gcu

    def forward(self, x: Tensor) -> Tensor:
        x1 = self.rep(x)
        x2 = T.add(x1, self.gcu(x1))
        if x2.shape == x.shape:
            x2 = T.add(x2, x)
        return x2


def _block_plan(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(in_channels, out_channels, stride) for every RepILN block, in order."""
    plan = []
    width = cfg.stage_channels[0]
    for out_width, n_blocks, stride in zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_strides):
        for i in range(n_blocks):
            last = i == n_blocks - 1
            plan.append((width, out_width if last else width, stride if last else 1))
        width = out_width
    return plan


class RepILN(Module):
    def __init__(self, cfg: Optional[ModelConfig] = None, mode: str = TRAIN, dtype=np.float32):
        cfg = cfg if cfg is not None else ModelConfig()
        if mode not in (TRAIN, DEPLOY):
            raise ValueError(f"mode must be {TRAIN!r} or {DEPLOY!r}")
        self._cfg = cfg
        self._mode = mode
        self.input_stats: Optional[InputStats] = None
        rng = np.random.default_rng(cfg.seed)

        def rep(c_in, c_out, stride):
            if mode == DEPLOY:
                return FusedRepBlock.empty(c_in, c_out, stride, cfg.block_activation, dtype)
            return RepBlock(c_in, c_out, stride, norm=cfg.norm_enabled, activation=cfg.block_activation,
                            rng=rng, dtype=dtype)

        self.stem = rep(cfg.in_channels, cfg.stage_channels[0], 1)
        self.blocks = []
        for c_in, c_out, stride in _block_plan(cfg):
            alpha = None if cfg.alpha_mode == "sqrt" else float(cfg.alpha_mode)
            gcu = SAGCU(c_out, expansion=cfg.expansion_ratio, gate_activation=cfg.gate_activation,
                        e=cfg.tssa_e, alpha=alpha, prenorm=cfg.gcu_prenorm, rng=rng, dtype=dtype)
            self.blocks.append(RepILNBlock(rep(c_in, c_out, stride), gcu))
        last = cfg.stage_channels[-1]
        self.tail = rep(last, last, 1)
        widths = [last, *cfg.head_hidden, cfg.out_dim]
        self.head = [Linear(a, b, rng=rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def mode(self) -> str:
        return self._mode

    def rep_blocks(self) -> list:
        return [self.stem, *(b.rep for b in self.blocks), self.tail]

    def features(self, x: Tensor) -> list[Tensor]:
        """Backbone activations after the stem, every block and the tail."""
        out = [self.stem(x)]
        for block in self.blocks:
            out.append(block(out[-1]))
        out.append(self.tail(out[-1]))
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim not in (2, 3) or x.shape[-2] != self._cfg.in_channels:
            raise ValueError(f"expected input ({self._cfg.in_channels}, L) or (B, {self._cfg.in_channels}, L), "
                             f"got {x.shape}")
        h = self.features(x)[-1]
        h = T.mean_time(h)
        for i, layer in enumerate(self.head):
            h = layer(h)
            if i < len(self.head) - 1:
                h = T.relu(h)
        return h

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Velocities for a stack of raw ``(B, C, L)`` windows (inference mode, no tape)."""
        x = np.asarray(windows, dtype=self.dtype)
        if self.input_stats is not None:
            x = (x - self.input_stats.mean[None, :, None]) / self.input_stats.std[None, :, None]
        was = self.training
        self.eval()
        try:
            return self.forward(Tensor(x.astype(self.dtype), dtype=self.dtype)).data
        finally:
            self.train(was)

    def clone(self) -> "RepILN":
        return copy.deepcopy(self)


def fuse_model(model: RepILN) -> RepILN:
    """Deploy-form copy with every RepBlock folded into a single conv."""
    if model.mode != TRAIN:
        raise ValueError("model is already in deploy form")
    out = model.clone()
    out.stem = out.stem.fuse()
    for block in out.blocks:
        block.rep = block.rep.fuse()
    out.tail = out.tail.fuse()
    out._mode = DEPLOY
    return out.eval()


def count_params(model: Module) -> int:
    return model.num_parameters()


def count_flops(model: RepILN, L: Optional[int] = None) -> int:
    """Analytic multiply-accumulate count of one forward pass on a ``(C, L)`` window.

    Convolutions count ``C_out * C_in/groups * K * L_out``; norm layers, pooling and
    the gating product count one MAC per element; attention adds ``C * L``
    for the score matrix and the value mix, twice ``C * L * L`` in total.
    """
    cfg = model.config
    L = cfg.window_length if L is None else L

    def rep_macs(rep, L_in):
        L_out = (L_in - 1) // rep.stride + 1
        if isinstance(rep, FusedRepBlock):
            return rep.out_channels * rep.in_channels * 3 * L_out, L_out
        total = rep.conv3.macs(L_out) + rep.conv1.macs(L_out)
        norms = [n for n in (rep.norm3, rep.norm1, rep.norm_id) if isinstance(n, BatchNorm1d)]
        total += len(norms) * rep.out_channels * L_out
        return total, L_out

    total, length = rep_macs(model.stem, L)
    for block in model.blocks:
        macs, length = rep_macs(block.rep, length)
        total += macs + block.gcu.macs(length)
    macs, length = rep_macs(model.tail, length)
    total += macs + model.tail.out_channels * length
    for layer in model.head:
        total += layer.weight.data.size
    return int(total)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"RPLN"
CKPT_VERSION = 1


class CheckpointError(FormatError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(model: RepILN) -> bytes:
    entries = list(model.named_tensors())
    if model.input_stats is not None:
        entries.append(("input_stats.mean", Tensor(model.input_stats.mean, dtype=np.float64)))
        entries.append(("input_stats.std", Tensor(model.input_stats.std, dtype=np.float64)))
    text = cfgmod.to_text(model.config, extra={"mode": model.mode, "dtype": np.dtype(model.dtype).name})
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(_pack_str(text))
    buf.write(struct.pack("<I", len(entries)))
    for name, t in entries:
        buf.write(_pack_str(name))
        T.write_tensor(buf, t)
    return buf.getvalue()


def save_checkpoint(model: RepILN, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def _read(fh, n, what):
    off = fh.tell()
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint reading {what} at offset {off}")
    return raw


def _read_str(fh, what) -> str:
    (n,) = struct.unpack("<I", _read(fh, 4, what + " length"))
    try:
        return _read(fh, n, what).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{what} is not valid UTF-8") from exc


def checkpoint_from_bytes(raw: bytes, mode: Optional[str] = None) -> RepILN:
    fh = io.BytesIO(raw)
    magic = _read(fh, 4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r} at offset 0")
    (version,) = struct.unpack("<H", _read(fh, 2, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4 (expected {CKPT_VERSION})")
    pairs = cfgmod.parse_text(_read_str(fh, "config"))
    saved_mode = pairs.get("mode", TRAIN)
    dtype = np.dtype(pairs.get("dtype", "float32"))
    cfg, _ = cfgmod.build(pairs, allow_extra=("mode", "dtype"))
    if mode is not None and mode != saved_mode:
        raise CheckpointError(f"checkpoint holds a {saved_mode}-form model, {mode}-form requested")
    (count,) = struct.unpack("<I", _read(fh, 4, "entry count"))
    state = {}
    for _ in range(count):
        name = _read_str(fh, "entry name")
        try:
            state[name] = T.read_tensor(fh).data
        except FormatError as exc:
            raise CheckpointError(f"entry {name!r}: {exc}") from None
    if fh.read(1):
        raise CheckpointError(f"trailing bytes at offset {fh.tell() - 1}")
    model = RepILN(cfg, mode=saved_mode, dtype=dtype)
    mean, std = state.pop("input_stats.mean", None), state.pop("input_stats.std", None)
    if (mean is None) != (std is None):
        raise CheckpointError("input_stats needs both mean and std entries")
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"config/tensor disagreement: {exc}") from None
    if mean is not None:
        model.input_stats = InputStats(mean, std)
    return model.eval() if saved_mode == DEPLOY else model


def load_checkpoint(path, mode: Optional[str] = None) -> RepILN:
    return checkpoint_from_bytes(Path(path).read_bytes(), mode=mode)
