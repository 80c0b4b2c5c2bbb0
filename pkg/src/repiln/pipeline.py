"""Glue between sequences, windows, the network and trajectory metrics."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import SequenceRecord, compute_stats, imu_matrix, make_windows, normalize, stack_windows
from .evaluation import EvalReport, RTE_INTERVAL, Trajectory, evaluate_trajectory, integrate_trajectory
from .model import RepILN, count_flops, count_params
from .training import TrainResult, train


def windows_for(records: Sequence[SequenceRecord], L: int, stride: int, frame: str):
    out = []
    for rec in records:
        out.extend(make_windows(rec, L, stride, frame))
    return out


def fit(model: RepILN, train_records: Sequence[SequenceRecord], val_records: Sequence[SequenceRecord],
        cfg: Optional[TrainConfig] = None, history_path=None) -> TrainResult:
    """Standardize with training-set statistics, then train; the stats ride along in the model."""
    cfg = cfg if cfg is not None else TrainConfig()
    mc = model.config
    tr = windows_for(train_records, mc.window_length, cfg.window_stride, mc.imu_frame)
    va = windows_for(val_records, mc.window_length, cfg.window_stride, mc.imu_frame)
    stats = compute_stats(tr)
    model.input_stats = stats
    return train(model, stack_windows(normalize(tr, stats)), stack_windows(normalize(va, stats)), cfg,
                 history_path=history_path)


def eval_windows(rec: SequenceRecord, L: int):
    """Start indices of windows that tile the sequence, consecutive windows sharing one sample."""
    n = len(rec)
    if L > n:
        raise ValueError(f"{rec.name}: window length {L} exceeds sequence length {n}")
    return list(range(0, n - L + 1, L - 1))


def predict_velocities(model: RepILN, rec: SequenceRecord, batch_size: int = 256):
    """(boundary times, per-window velocities) over windows tiling ``rec``."""
    mc: ModelConfig = model.config
    L = mc.window_length
    imu = imu_matrix(rec, mc.imu_frame)
    starts = eval_windows(rec, L)
    x = np.stack([imu[:, s:s + L] for s in starts])
    v = np.concatenate([model.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    t = rec.timestamps
    times = np.array([t[starts[0]]] + [t[s + L - 1] for s in starts])
    return times, v.astype(np.float64)


def ground_truth(rec: SequenceRecord) -> Trajectory:
    return Trajectory(rec.timestamps, rec.gt_position)


def predict_trajectory(model: RepILN, rec: SequenceRecord) -> Trajectory:
    times, v = predict_velocities(model, rec)
    start = int(np.searchsorted(rec.timestamps, times[0]))
    return integrate_trajectory(times, v, rec.gt_position[:, start])


def oracle_trajectory(rec: SequenceRecord, L: int) -> Trajectory:
    """Dead reckoning with the exact window-mean velocities (a perfect predictor)."""
    starts = eval_windows(rec, L)
    t, p = rec.timestamps, rec.gt_position
    ends = [s + L - 1 for s in starts]
    v = np.stack([(p[:, e] - p[:, s]) / (t[e] - t[s]) for s, e in zip(starts, ends)])
    times = np.array([t[starts[0]]] + [t[e] for e in ends])
    return integrate_trajectory(times, v, p[:, starts[0]])


def evaluate(model: RepILN, records: Sequence[SequenceRecord], interval: float = RTE_INTERVAL) -> EvalReport:
    report = EvalReport(params=count_params(model), flops=count_flops(model))
    for rec in records:
        report.sequences.append(evaluate_trajectory(rec.name, predict_trajectory(model, rec),
                                                    ground_truth(rec), interval))
    return report
