"""IMU sequences on disk, training windows with velocity targets, and a planar strapdown simulator."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import InputStats
from .tensor import FormatError, load_tensor, save_tensor

GRAVITY = 9.81
NOMINAL_RATE = 200.0
FILES = ("time", "gyro", "accel", "gt_pos", "gt_yaw")
SUFFIX = ".rpt"


class DatasetError(ValueError):
    pass


@dataclass
class SequenceRecord:
    """One recording: body-frame gyro/accel (3 x N) plus planar ground truth."""

    name: str
    timestamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    gt_position: np.ndarray
    gt_yaw: Optional[np.ndarray] = None
    rate: float = NOMINAL_RATE

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return self.timestamps.shape[0]

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0])

    def validate(self) -> None:
        t = self.timestamps
        if t.ndim != 1 or t.size < 2:
            raise DatasetError(f"{self.name}: time must be a 1-D array with at least 2 samples")
        n = t.size
        for label, arr, rows in (("gyro", self.gyro, 3), ("accel", self.accel, 3), ("gt_pos", self.gt_position, 2)):
            if arr.shape != (rows, n):
                raise DatasetError(f"{self.name}: {label} has shape {arr.shape}, expected ({rows}, {n})")
        if self.gt_yaw is not None and self.gt_yaw.shape != (n,):
            raise DatasetError(f"{self.name}: gt_yaw has shape {self.gt_yaw.shape}, expected ({n},)")
        dt = np.diff(t)
        if np.any(dt <= 0):
            raise DatasetError(f"{self.name}: timestamps are not strictly increasing")
        measured = (n - 1) / (t[-1] - t[0])
        if abs(measured - self.rate) > 0.01 * self.rate:
            raise DatasetError(f"{self.name}: sample rate {measured:.3f} Hz is not within 1% of {self.rate} Hz")


@dataclass
class WindowSample:
    imu: np.ndarray  # (6, L): gyro rows 0-2, accel rows 3-5
    target_velocity: np.ndarray
    t_start: float
    t_end: float
    start: int = 0
    normalized: bool = False


# ---------------------------------------------------------------------------
# on-disk layout: <root>/manifest.txt + <root>/<name>/{time,gyro,accel,gt_pos[,gt_yaw]}.rpt

def write_sequence(directory, rec: SequenceRecord) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"time": rec.timestamps, "gyro": rec.gyro, "accel": rec.accel, "gt_pos": rec.gt_position,
              "gt_yaw": rec.gt_yaw}
    for name in FILES:
        if arrays[name] is not None:
            save_tensor(d / (name + SUFFIX), np.asarray(arrays[name], dtype=np.float64, order="C"))


def write_dataset(root, records: Sequence[SequenceRecord]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise DatasetError("sequence names must be unique")
    for rec in records:
        write_sequence(root / rec.name, rec)
    (root / "manifest.txt").write_bytes("".join(n + "\n" for n in names).encode("utf-8"))


def read_sequence(directory, name: Optional[str] = None, rate: float = NOMINAL_RATE) -> SequenceRecord:
    d = Path(directory)
    name = name or d.name
    arrays = {}
    for key in FILES:
        path = d / (key + SUFFIX)
        if not path.exists():
            if key == "gt_yaw":
                arrays[key] = None
                continue
            raise DatasetError(f"{name}: missing file {path.name}")
        try:
            arrays[key] = load_tensor(path).data.astype(np.float64)
        except FormatError as exc:
            raise DatasetError(f"{name}: {path.name}: {exc}") from None
    return SequenceRecord(name, arrays["time"], arrays["gyro"], arrays["accel"], arrays["gt_pos"],
                          arrays["gt_yaw"], rate=rate)


def load_dataset(root, rate: float = NOMINAL_RATE) -> list[SequenceRecord]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"missing manifest: {manifest}")
    names = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [read_sequence(root / n, n, rate) for n in names]


# ---------------------------------------------------------------------------
# windows

def _rotate_planar(xyz: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    out = xyz.copy()
    out[0] = c * xyz[0] - s * xyz[1]
    out[1] = s * xyz[0] + c * xyz[1]
    return out


def imu_matrix(rec: SequenceRecord, frame: str = "world") -> np.ndarray:
    """Stacked (6, N) gyro/accel, optionally rotated by ground-truth yaw into the world frame."""
    gyro, accel = rec.gyro, rec.accel
    if frame == "world":
        if rec.gt_yaw is None:
            raise DatasetError(f"{rec.name}: world-frame windows need gt_yaw")
        gyro, accel = _rotate_planar(gyro, rec.gt_yaw), _rotate_planar(accel, rec.gt_yaw)
    elif frame != "body":
        raise ValueError(f"unknown frame {frame!r}")
    return np.concatenate([gyro, accel], axis=0)


def window_starts(n: int, L: int, stride: int) -> range:
    if L > n:
        raise DatasetError(f"window length {L} exceeds sequence length {n}")
    if L < 2 or stride < 1:
        raise DatasetError("need L >= 2 and stride >= 1")
    return range(0, n - L + 1, stride)


def make_windows(rec: SequenceRecord, L: int, stride: int, frame: str = "world") -> list[WindowSample]:
    """Windows at offsets ``0, stride, ...``; the target is the mean velocity over the window."""
    imu = imu_matrix(rec, frame)
    t, p = rec.timestamps, rec.gt_position
    out = []
    for s in window_starts(len(rec), L, stride):
        e = s + L - 1
        v = (p[:, e] - p[:, s]) / (t[e] - t[s])
        out.append(WindowSample(imu[:, s:s + L].copy(), v, float(t[s]), float(t[e]), start=s))
    return out


def stack_windows(windows: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        raise DatasetError("no windows to stack")
    return (np.stack([w.imu for w in windows]), np.stack([w.target_velocity for w in windows]))


def compute_stats(windows: Sequence[WindowSample]) -> InputStats:
    x, _ = stack_windows(windows)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    return InputStats(mean, std)


def normalize(windows: Sequence[WindowSample], stats: InputStats) -> list[WindowSample]:
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(std <= 0):
        bad = [int(i) for i in np.flatnonzero(std <= 0)]
        raise DatasetError(f"channel(s) {bad} have zero standard deviation")
    out = []
    for w in windows:
        if w.normalized:
            raise DatasetError(f"window at t={w.t_start} is already normalized")
        imu = (w.imu - stats.mean[:, None]) / std[:, None]
        out.append(replace(w, imu=imu, normalized=True))
    return out


def split_sequences(records: Sequence, ratios=(8, 1, 1), seed: int = 0):
    """Sequence-level train/val/test split (no window leaks across splits)."""
    idx = np.random.default_rng(seed).permutation(len(records))
    total = sum(ratios)
    n_train = int(round(len(records) * ratios[0] / total))
    n_val = int(round(len(records) * ratios[1] / total))
    if len(records) >= 3:
        n_train = min(max(n_train, 1), len(records) - 2)
        n_val = max(n_val, 1)
    pick = lambda ids: [records[i] for i in sorted(ids)]  # noqa: E731
    return pick(idx[:n_train]), pick(idx[n_train:n_train + n_val]), pick(idx[n_train + n_val:])


# ---------------------------------------------------------------------------
# planar strapdown simulator

MOTIONS = ("straight", "circle", "random-turn")


@dataclass
class SynthSpec:
    duration: float = 10.0
    rate: float = NOMINAL_RATE
    motion: str = "straight"
    speed: float = 1.0
    radius: float = 2.0
    heading: float = 0.0
    turn_rate_max: float = 0.8
    segment_range: tuple[float, float] = (1.0, 3.0)
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "seq"

    def validate(self):
        if not (self.duration > 0 and self.rate > 0):
            raise ValueError("duration and rate must be positive")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}, got {self.motion!r}")
        if self.speed < 0 or self.radius <= 0 or self.gyro_noise < 0 or self.accel_noise < 0:
            raise ValueError("speed, noise must be non-negative and radius positive")
        if int(round(self.duration * self.rate)) < 1:
            raise ValueError("duration too short for a single sample interval")


def _yaw_rate_profile(spec: SynthSpec, rng: np.random.Generator):
    """Piecewise-constant turn rate as (breakpoints, rates) covering [0, duration]."""
    if spec.motion == "straight":
        return np.array([0.0, spec.duration]), np.array([0.0])
    if spec.motion == "circle":
        return np.array([0.0, spec.duration]), np.array([spec.speed / spec.radius])
    edges, rates, t = [0.0], [], 0.0
    lo, hi = spec.segment_range
    while t < spec.duration:
        t = min(t + rng.uniform(lo, hi), spec.duration)
        edges.append(t)
        rates.append(0.0 if rng.random() < 0.3 else rng.uniform(-spec.turn_rate_max, spec.turn_rate_max))
    return np.array(edges), np.array(rates)


def _integrate_exact(t: np.ndarray, edges, rates, speed: float, heading0: float):
    """Closed-form heading and position for constant speed under piecewise-constant turn rate."""
    yaw = np.empty_like(t)
    pos = np.empty((2, t.size))
    omega = np.empty_like(t)
    p0, h0 = np.zeros(2), heading0
    for i, w in enumerate(rates):
        a, b = edges[i], edges[i + 1]
        sel = (t >= a) & ((t < b) | (i == len(rates) - 1))
        tau = t[sel] - a
        h = h0 + w * tau
        yaw[sel], omega[sel] = h, w
        if w == 0.0:
            pos[0, sel] = p0[0] + speed * tau * math.cos(h0)
            pos[1, sel] = p0[1] + speed * tau * math.sin(h0)
        else:
            pos[0, sel] = p0[0] + speed / w * (np.sin(h) - math.sin(h0))
            pos[1, sel] = p0[1] - speed / w * (np.cos(h) - math.cos(h0))
        span = b - a
        h1 = h0 + w * span
        if w == 0.0:
            p0 = p0 + speed * span * np.array([math.cos(h0), math.sin(h0)])
        else:
            p0 = p0 + speed / w * np.array([math.sin(h1) - math.sin(h0), -(math.cos(h1) - math.cos(h0))])
        h0 = h1
    return yaw, pos, omega


def synth_generate(spec: SynthSpec, seed: int = 0) -> SequenceRecord:
    """Constant-speed planar motion seen by a level, heading-aligned IMU.

    Body x points along the velocity, z up; the accelerometer reports specific
    force, so a resting sensor reads ``(0, 0, +g)``.  Noise and biases are added
    after the exact signals are formed; ground truth stays noise-free.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration * spec.rate)) + 1
    t = np.arange(n) / spec.rate
    edges, rates = _yaw_rate_profile(spec, rng)
    yaw, pos, omega = _integrate_exact(t, edges, rates, spec.speed, spec.heading)

    gyro = np.zeros((3, n))
    gyro[2] = omega
    accel = np.zeros((3, n))
    accel[1] = spec.speed * omega  # centripetal, towards the turn centre
    accel[2] = GRAVITY

    gyro += np.asarray(spec.gyro_bias, dtype=float)[:, None]
    accel += np.asarray(spec.accel_bias, dtype=float)[:, None]
    if spec.gyro_noise > 0:
        gyro += rng.normal(0.0, spec.gyro_noise, size=gyro.shape)
    if spec.accel_noise > 0:
        accel += rng.normal(0.0, spec.accel_noise, size=accel.shape)
    return SequenceRecord(spec.name, t, gyro, accel, pos, yaw, rate=spec.rate)


def world_acceleration(rec: SequenceRecord) -> np.ndarray:
    """Gravity-compensated planar acceleration in the world frame (needs gt_yaw)."""
    acc = _rotate_planar(rec.accel, rec.gt_yaw)
    return acc[:2]


def synthetic_corpus(count: int, duration: float = 10.0, motion: str = "mixed", seed: int = 0,
                     rate: float = NOMINAL_RATE, speed: float = 1.0, gyro_noise: float = 0.01,
                     accel_noise: float = 0.05, prefix: str = "seq") -> list[SequenceRecord]:
    """``count`` sequences; ``mixed`` alternates straight and circle.

    Straight runs keep the given speed along +x.  Circles and random turns
    draw speed, radius and initial heading from the per-sequence seed.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    out = []
    for i in range(count):
        kind = ("straight", "circle")[i % 2] if motion == "mixed" else motion
        seq_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rng = np.random.default_rng(seq_seed)
        if kind == "straight":
            spec = SynthSpec(duration=duration, rate=rate, motion=kind, speed=speed)
        else:
            spec = SynthSpec(duration=duration, rate=rate, motion=kind, speed=float(speed * rng.uniform(0.6, 1.4)),
                             radius=float(rng.uniform(1.5, 4.0)), heading=float(rng.uniform(-np.pi, np.pi)))
        spec = replace(spec, gyro_noise=gyro_noise, accel_noise=accel_noise, name=f"{prefix}{i:03d}")
        out.append(synth_generate(spec, seed=seq_seed))
    return out
