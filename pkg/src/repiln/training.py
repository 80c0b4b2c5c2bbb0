"""Adam, a reduce-on-plateau schedule with a learning-rate floor, and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .model import RepILN
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad
            if g is None:
                raise ValueError("parameter has no gradient; run backward first")
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged("non-finite gradient")
            grads.append(g)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a new best."""

    def __init__(self, optimizer: Adam, factor: float = 0.1, patience: int = 10):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.opt.lr *= self.factor
            self.bad_epochs = 0
            return True
        return False


def below_floor(lr: float, floor: float) -> bool:
    # relative slack so 1e-4 * 0.1 * 0.1 still counts as reaching 1e-6, not dropping under it
    return lr < floor * (1 - 1e-9)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_loss!r},{self.lr!r}"


@dataclass
class TrainResult:
    model: RepILN
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = float("inf")
    stop_reason: str = ""


def batch_loss(model: RepILN, x: np.ndarray, y: np.ndarray) -> float:
    pred = model(Tensor(x.astype(model.dtype), dtype=model.dtype))
    return T.mse_loss(pred, Tensor(y.astype(model.dtype), dtype=model.dtype)).item()


def evaluate_loss(model: RepILN, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Mean squared error over a whole set (inference-mode norms)."""
    was = model.training
    model.eval()
    try:
        total = 0.0
        for i in range(0, len(x), batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            total += batch_loss(model, xb, yb) * yb.size
        return total / y.size
    finally:
        model.train(was)


def train_step(model: RepILN, opt: Adam, xb: np.ndarray, yb: np.ndarray) -> float:
    dtype = model.dtype
    params = model.parameters()
    try:
        with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            pred = model(Tensor(xb.astype(dtype), dtype=dtype))
            loss = T.mse_loss(pred, Tensor(yb.astype(dtype), dtype=dtype))
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc)) from None
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    tape.backward(loss, params=params)
    opt.step()
    return value


def train(model: RepILN, train_set: tuple[np.ndarray, np.ndarray], val_set: tuple[np.ndarray, np.ndarray],
          cfg: Optional[TrainConfig] = None, history_path=None, val_loss_fn=None) -> TrainResult:
    """Minibatch MSE training; returns the weights with the lowest validation loss.

    ``val_loss_fn(model) -> float`` overrides the validation measurement
    (used to force plateaus in tests).
    """
    cfg = cfg if cfg is not None else TrainConfig()
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.initial_lr)
    sched = PlateauScheduler(opt, cfg.factor, cfg.patience)
    result = TrainResult(model)
    best_state = model.state_dict()
    fh = open(history_path, "wb") if history_path is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            if below_floor(opt.lr, cfg.lr_floor):
                result.stop_reason = "lr_floor"
                break
            lr = opt.lr
            model.train()
            order = rng.permutation(len(x_tr))
            total = 0.0
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                total += train_step(model, opt, x_tr[idx], y_tr[idx]) * len(idx)
            train_loss = total / len(order)
            val_loss = val_loss_fn(model) if val_loss_fn is not None else evaluate_loss(model, x_va, y_va)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"validation loss became {val_loss} at epoch {epoch}")
            rec = EpochRecord(epoch, float(train_loss), float(val_loss), float(lr))
            result.history.append(rec)
            if fh is not None:
                fh.write((rec.line() + "\n").encode("utf-8"))
                fh.flush()
            log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
            if val_loss < result.best_val:
                result.best_val, result.best_epoch = float(val_loss), epoch
                best_state = model.state_dict()
            sched.step(val_loss)
        else:
            result.stop_reason = "max_epochs"
    finally:
        if fh is not None:
            fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_history(history: Sequence[EpochRecord], path) -> None:
    Path(path).write_bytes("".join(r.line() + "\n" for r in history).encode("utf-8"))
