"""Dead reckoning from predicted velocities, ATE/RTE, and report files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RTE_INTERVAL = 60.0


@dataclass
class Trajectory:
    timestamps: np.ndarray
    position: np.ndarray  # (2, M)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.timestamps.size < 2:
            raise ValueError("a trajectory needs at least two timestamps")
        if self.position.shape != (2, self.timestamps.size):
            raise ValueError(f"position shape {self.position.shape} != (2, {self.timestamps.size})")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def at(self, t: np.ndarray) -> np.ndarray:
        """Linear interpolation of the positions at times ``t`` (inside the span)."""
        return np.stack([np.interp(t, self.timestamps, self.position[k]) for k in range(2)])

    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.position, axis=1), axis=0)))


def integrate_trajectory(times: Sequence[float], velocities: np.ndarray, p0=(0.0, 0.0)) -> Trajectory:
    """``p[k+1] = p[k] + v[k] * (t[k+1] - t[k])`` starting from ``p0`` at ``times[0]``.

    ``times`` holds one more entry than ``velocities``; velocity ``k`` applies on
    ``[times[k], times[k+1]]``.
    """
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    if t.size != v.shape[0] + 1:
        raise ValueError(f"need len(times) == len(velocities) + 1, got {t.size} and {v.shape[0]}")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("prediction timestamps are not ordered")
    steps = v * dt[:, None]
    pos = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)]) + np.asarray(p0, dtype=np.float64)
    return Trajectory(t, pos.T)


def _overlap(pred: Trajectory, gt: Trajectory):
    tol = 1e-9
    sel = (gt.timestamps >= pred.timestamps[0] - tol) & (gt.timestamps <= pred.timestamps[-1] + tol)
    if not np.any(sel):
        raise ValueError("predicted and ground-truth trajectories do not overlap in time")
    ts = gt.timestamps[sel]
    return ts, pred.at(ts), gt.position[:, sel]


def ate(pred: Trajectory, gt: Trajectory) -> float:
    """RMS position error on the ground-truth timestamps, no alignment."""
    _, p_hat, p = _overlap(pred, gt)
    return float(np.sqrt(np.mean(np.sum((p_hat - p) ** 2, axis=0))))


def rte(pred: Trajectory, gt: Trajectory, interval: float = RTE_INTERVAL) -> float:
    """RMS error of displacements over ``interval`` seconds, sliding at the ground-truth rate.

    Sequences shorter than ``interval`` fall back to the whole-span
    displacement error scaled by ``interval / duration``.
    """
    ts, p_hat, p = _overlap(pred, gt)
    if ts.size < 2:
        raise ValueError("need at least two overlapping samples for RTE")
    ends = ts + interval
    ok = ends <= ts[-1] + 1e-9
    if not np.any(ok):
        duration = ts[-1] - ts[0]
        err = (p_hat[:, -1] - p_hat[:, 0]) - (p[:, -1] - p[:, 0])
        return float(np.linalg.norm(err) * interval / duration)
    ends = np.minimum(ends[ok], ts[-1])
    d_hat = pred.at(ends) - p_hat[:, ok]
    d = gt.at(ends) - p[:, ok]
    return float(np.sqrt(np.mean(np.sum((d_hat - d) ** 2, axis=0))))


def empirical_cdf(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return v, np.arange(1, v.size + 1) / v.size


# ---------------------------------------------------------------------------
# reports

@dataclass
class SequenceMetrics:
    name: str
    ate: float
    rte: float
    length: float
    pred: Optional[Trajectory] = None
    gt: Optional[Trajectory] = None


@dataclass
class EvalReport:
    sequences: list[SequenceMetrics] = field(default_factory=list)
    params: Optional[int] = None
    flops: Optional[int] = None

    @property
    def mean_ate(self) -> float:
        return float(np.mean([s.ate for s in self.sequences]))

    @property
    def mean_rte(self) -> float:
        return float(np.mean([s.rte for s in self.sequences]))

    def cdf(self, metric: str):
        return empirical_cdf([getattr(s, metric) for s in self.sequences])


def evaluate_trajectory(name: str, pred: Trajectory, gt: Trajectory, interval: float = RTE_INTERVAL):
    return SequenceMetrics(name, ate(pred, gt), rte(pred, gt, interval), gt.length(), pred, gt)


def _svg(pred: Trajectory, gt: Trajectory, title: str, size: int = 480) -> str:
    pts = np.concatenate([pred.position, gt.position], axis=1)
    lo, hi = pts.min(axis=1), pts.max(axis=1)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    pad = 0.05 * span
    lo = lo - pad
    span += 2 * pad

    def poly(tr: Trajectory, colour: str, label: str) -> str:
        xs = (tr.position[0] - lo[0]) / span * size
        ys = size - (tr.position[1] - lo[1]) / span * size
        coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
        return (f'<polyline class="{label}" fill="none" stroke="{colour}" stroke-width="1.5" '
                f'points="{coords}"/>')

    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}" '
        f'viewBox="0 0 {size} {size + 40}">',
        f"<title>{title}</title>",
        poly(gt, "black", "ground-truth"),
        poly(pred, "#e07000", "prediction"),
        f'<text x="4" y="{size + 16}" font-size="12">{title}: span {span:.2f} m '
        f'(x from {lo[0]:.2f} m, y from {lo[1]:.2f} m)</text>',
        f'<text x="4" y="{size + 32}" font-size="12">black: ground truth, orange: prediction</text>',
        "</svg>",
        "",
    ])


def emit_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["name,ate,rte,length"] + [f"{s.name},{float(s.ate)!r},{float(s.rte)!r},{float(s.length)!r}" for s in report.sequences]
    (out / "metrics.csv").write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    for metric in ("ate", "rte"):
        values, frac = report.cdf(metric)
        lines = ["value,cumulative_fraction"] + [f"{float(v)!r},{float(f)!r}" for v, f in zip(values, frac)]
        (out / f"cdf_{metric}.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    for s in report.sequences:
        if s.pred is not None and s.gt is not None:
            text = _svg(s.pred, s.gt, f"{s.name} (ATE {s.ate:.3f} m, RTE {s.rte:.3f} m)")
            (out / f"trajectory_{s.name}.svg").write_bytes(text.encode("utf-8"))
    if report.params is not None or report.flops is not None:
        summary = f"params,{report.params}\nmacs,{report.flops}\n"
        (out / "summary.csv").write_bytes(summary.encode("utf-8"))
