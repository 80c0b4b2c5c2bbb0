"""Command-line entry point: ``repiln {synth,train,fuse,eval,predict,info}``.

Exit codes: 0 success, 2 usage or input error, 3 divergence during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import MOTIONS, DatasetError, load_dataset, read_sequence, split_sequences, synthetic_corpus, write_dataset
from .evaluation import emit_report
from .model import (CheckpointError, DEPLOY, TRAIN, RepILN, count_flops, count_params, fuse_model,
                    load_checkpoint, save_checkpoint)
from .pipeline import evaluate, fit, predict_velocities
from .evaluation import integrate_trajectory
from .training import TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _positive(kind):
    def check(raw):
        value = kind(raw)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {raw}")
        return value
    return check


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _show_config(**items) -> None:
    for k, v in items.items():
        _say(f"{k}={v}")


def cmd_synth(args) -> int:
    _show_config(out=args.out, sequences=args.sequences, duration=args.duration, motion=args.motion,
                 rate=args.rate, speed=args.speed, gyro_noise=args.gyro_noise, accel_noise=args.accel_noise,
                 seed=args.seed)
    records = synthetic_corpus(args.sequences, args.duration, args.motion, args.seed, rate=args.rate,
                               speed=args.speed, gyro_noise=args.gyro_noise, accel_noise=args.accel_noise)
    try:
        write_dataset(args.out, records)
    except OSError as exc:
        raise UsageError(f"cannot write dataset: {exc}") from None
    _say(f"wrote {len(records)} sequences to {args.out}")
    return EXIT_OK


def _load_data(path) -> list:
    if not Path(path).is_dir():
        raise UsageError(f"data directory not found: {path}")
    return load_dataset(path)


def cmd_train(args) -> int:
    if args.resume is not None:
        raise UsageError("--resume is not supported; start a fresh run")
    pairs = cfgmod.parse_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    model_cfg, train_cfg = cfgmod.build(pairs)
    # --seed wins over any seed in the config file
    seed = train_cfg.seed if args.seed is None else args.seed
    model_cfg = cfgmod.replace(model_cfg, seed=seed)
    train_cfg = cfgmod.replace(train_cfg, seed=seed)
    _say(cfgmod.to_text(model_cfg, train_cfg).rstrip())
    _say(f"seed={seed}")
    records = _load_data(args.data)
    train_recs, val_recs, _ = split_sequences(records, seed=seed)
    if not train_recs or not val_recs:
        raise UsageError("need at least 3 sequences for a train/val/test split")
    model = RepILN(model_cfg)
    history = args.history or str(args.out) + ".history"
    result = fit(model, train_recs, val_recs, train_cfg, history_path=history)
    save_checkpoint(model, args.out)
    first, last = result.history[0], result.history[-1]
    _say(f"epochs={len(result.history)} stop={result.stop_reason} best_epoch={result.best_epoch} "
         f"best_val={result.best_val:.6g}")
    _say(f"train_loss first={first.train_loss:.6g} last={last.train_loss:.6g}")
    _say(f"checkpoint={args.out} history={history}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_checkpoint(args.inp)
    _say(cfgmod.to_text(model.config, extra={"mode": model.mode}).rstrip())
    if model.mode != TRAIN:
        raise UsageError("input checkpoint is already in deploy form")
    fused = fuse_model(model)
    before, after = count_params(model), count_params(fused)
    save_checkpoint(fused, args.out)
    _say(f"params_train={before}")
    _say(f"params_deploy={after}")
    _say(f"reduction_percent={100.0 * (before - after) / before:.2f}")
    return EXIT_OK


def _check_lengths(model: RepILN, records) -> None:
    L = model.config.window_length
    short = [r.name for r in records if len(r) < L]
    if short:
        raise UsageError(f"checkpoint window_length={L} exceeds sequence length for: {', '.join(short)}")


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    _say(cfgmod.to_text(model.config, extra={"mode": model.mode}).rstrip())
    records = _load_data(args.data)
    _check_lengths(model, records)
    report = evaluate(model, records)
    emit_report(report, args.out)
    for s in report.sequences:
        _say(f"{s.name} ate={s.ate:.4f} rte={s.rte:.4f} length={s.length:.2f}")
    if report.sequences:
        _say(f"mean ate={report.mean_ate:.4f} rte={report.mean_rte:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt)
    _say(cfgmod.to_text(model.config, extra={"mode": model.mode}).rstrip())
    if not Path(args.sequence).is_dir():
        raise UsageError(f"sequence directory not found: {args.sequence}")
    rec = read_sequence(args.sequence)
    _check_lengths(model, [rec])
    times, v = predict_velocities(model, rec)
    start = int(np.searchsorted(rec.timestamps, times[0]))
    traj = integrate_trajectory(times, v, rec.gt_position[:, start])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ["t_start,t_end,vx,vy"] + [f"{float(a)!r},{float(b)!r},{float(x)!r},{float(y)!r}"
                                      for a, b, (x, y) in zip(times[:-1], times[1:], v)]
    out.write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    traj_path = out.with_name(out.stem + "_trajectory.csv")
    rows = ["t,x,y"] + [f"{float(t)!r},{float(x)!r},{float(y)!r}"
                        for t, x, y in zip(traj.timestamps, *traj.position)]
    traj_path.write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    _say(f"wrote {len(v)} window velocities to {out} and trajectory to {traj_path}")
    return EXIT_OK


def cmd_info(args) -> int:
    model = load_checkpoint(args.ckpt)
    L = model.config.window_length
    _say(f"mode={model.mode}")
    _say(cfgmod.to_text(model.config).rstrip())
    _say(f"params={count_params(model)}")
    _say(f"macs@L={L}: {count_flops(model, L)}")
    _say(f"macs@L={2 * L}: {count_flops(model, 2 * L)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repiln", description="Reparameterized inertial localization network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training epoch")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic IMU dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=8)
    s.add_argument("--duration", type=_positive(float), default=10.0)
    s.add_argument("--motion", choices=(*MOTIONS, "mixed"), default="mixed")
    s.add_argument("--rate", type=_positive(float), default=200.0)
    s.add_argument("--speed", type=float, default=1.0)
    s.add_argument("--gyro-noise", type=float, default=0.01)
    s.add_argument("--accel-noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--history")
    t.add_argument("--resume", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fold a train-form checkpoint into deploy form")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("eval", help="ATE/RTE report over a dataset directory")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="per-window velocities and trajectory for one sequence")
    r.add_argument("--sequence", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("info", help="describe a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "sequences", 1) < 0:
        parser.error("--sequences must be non-negative")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, CheckpointError, DatasetError, cfgmod.ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
