"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""
import hashlib
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repiln import config as C
from repiln import tensor as T
from repiln.data import split_sequences, synthetic_corpus, write_dataset
from repiln.evaluation import Trajectory, ate, rte
from repiln.gcu import SAGCU
from repiln.model import RepILN, checkpoint_bytes, count_params, fuse_model, load_checkpoint, save_checkpoint
from repiln.pipeline import evaluate, fit
from repiln.repblock import RepBlock
from repiln.tensor import Tensor
from repiln.training import train
from repiln.tssa import TSSA, max_e_mask, retained_count, sparse_attention

from conftest import randomize_norms, record_acceptance
from oracles import brute_ate, brute_rte, random_pair


class Checks:
    """Collects sub-check outcomes so a criterion reports once, then fails loudly."""

    def __init__(self):
        self.failed = []
        self.notes = []

    def check(self, ok, what):
        if not ok:
            self.failed.append(what)

    def note(self, text):
        self.notes.append(text)

    def finish(self, number, title):
        ok = not self.failed
        detail = "; ".join(self.notes + [f"failed: {f}" for f in self.failed])
        record_acceptance(number, title, ok, detail)
        assert ok, self.failed


def f64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def test_1_fusion_equivalence():
    c = Checks()
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst64 = worst32 = 0.0
    for i in range(50):
        c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        if i % 3 == 0:
            c_out = c_in  # make sure identity branches are exercised
        stride = int(rng.choice([1, 2]))
        norm = bool(i % 2)
        L = int(rng.integers(4, 41))
        seed = int(rng.integers(2**31))
        for dtype in (np.float64, np.float32):
            r = np.random.default_rng(seed)
            b = RepBlock(c_in, c_out, stride, norm=norm, rng=r, dtype=dtype)
            for conv in (b.conv3, b.conv1):
                conv.bias.data = r.normal(size=c_out).astype(dtype)
            randomize_norms(b, r).eval()
            x = Tensor(r.normal(size=(4, c_in, L)).astype(dtype), dtype=dtype)
            dev = float(np.max(np.abs(b(x).data - b.fuse()(x).data)))
            if dtype is np.float64:
                worst64 = max(worst64, dev)
            else:
                worst32 = max(worst32, dev)
    c.check(worst64 <= 1e-10, f"RepBlock 64-bit deviation {worst64:.3g}")
    c.check(worst32 <= 1e-4, f"RepBlock 32-bit deviation {worst32:.3g}")

    windows = np.random.default_rng(7).normal(size=(100, 6, 200))
    for dtype, bound in ((np.float64, 1e-10), (np.float32, 1e-4)):
        m = randomize_norms(RepILN(C.ModelConfig(), dtype=dtype), np.random.default_rng(11)).eval()
        d = fuse_model(m)
        x = Tensor(windows.astype(dtype), dtype=dtype)
        dev = float(np.max(np.abs(m(x).data - d(x).data)))
        c.check(dev <= bound, f"whole model {np.dtype(dtype).name} deviation {dev:.3g}")
        c.note(f"model {np.dtype(dtype).name} {dev:.2g}")
    elapsed = time.perf_counter() - start
    c.check(elapsed < 60, f"runtime {elapsed:.1f}s")
    c.note(f"blocks 64-bit {worst64:.2g}, 32-bit {worst32:.2g}, {elapsed:.1f}s")
    c.finish(1, "fusion equivalence")


@given(st.lists(st.integers(1, 12), min_size=1, max_size=4), st.data())
@settings(max_examples=40, deadline=None)
def _deploy_smaller(widths, data):
    n = len(widths)
    cfg = C.ModelConfig(
        stage_channels=tuple(widths),
        blocks_per_stage=tuple(data.draw(st.lists(st.integers(1, 3), min_size=n, max_size=n))),
        stage_strides=tuple(data.draw(st.lists(st.sampled_from([1, 2]), min_size=n, max_size=n))),
        window_length=64,
        head_hidden=tuple(data.draw(st.lists(st.integers(1, 16), max_size=2))),
        norm_enabled=data.draw(st.booleans()),
        expansion_ratio=data.draw(st.sampled_from([0.5, 1.0, 2.0])),
        gcu_prenorm=data.draw(st.booleans()),
    )
    m = RepILN(cfg)
    assert count_params(fuse_model(m)) < count_params(m)


def test_2_parameter_reduction():
    c = Checks()
    m = RepILN(C.ModelConfig())
    before, after = count_params(m), count_params(fuse_model(m))
    pct = 100 * (before - after) / before
    c.check(10 <= pct <= 20, f"default reduction {pct:.2f}%")
    c.note(f"{before} -> {after} params, {pct:.2f}%")
    try:
        _deploy_smaller()
    except AssertionError as exc:
        c.check(False, f"deploy not smaller for some config: {exc}")
    c.finish(2, "parameter reduction")


def test_3_tssa_correctness():
    c = Checks()
    rng = np.random.default_rng(3)
    q, k, v = (f64(rng.normal(size=(4, 24))) for _ in range(3))
    s = T.scale(T.matmul(T.transpose(q), k), 0.5)
    dense = T.matmul(v, T.transpose(T.softmax_rows(s))).data
    c.check(np.array_equal(sparse_attention(q, k, v, 2.0, 100).data, dense), "e=100 differs from dense")

    neg = T.sentinel(np.float64)
    worst_sum = 0.0
    for L in (8, 32, 200):
        for e in (10, 25, 50, 75, 100):
            scores = f64(rng.normal(size=(L, L)))
            masked = max_e_mask(scores, e).data
            want = max(1, math.ceil(e / 100 * L))
            c.check(retained_count(e, L) == want, f"retained_count({e}, {L})")
            c.check(bool(np.all((masked != neg).sum(axis=1) == want)), f"row support e={e} L={L}")
            a = T.softmax_rows(f64(masked)).data
            worst_sum = max(worst_sum, float(np.max(np.abs(a.sum(axis=1) - 1))))
            c.check(bool(np.all(a[masked == neg] == 0)), f"masked weights e={e} L={L}")
    c.check(worst_sum <= 1e-6, f"row sums off by {worst_sum:.3g}")

    for C_ in (8, 16, 64):
        t = TSSA(C_)
        c.check(t.attention_macs(400) == 4 * t.attention_macs(200), f"attention MACs C={C_}")
    # projections add 3C^2 L + 9CL, so the total only tracks x4 once L is large next to C
    ratios = {}
    for C_, L in ((8, 200), (16, 800), (64, 3200)):
        ratios[(C_, L)] = TSSA(C_).macs(2 * L) / TSSA(C_).macs(L)
        c.check(abs(ratios[(C_, L)] - 4) <= 0.2, f"MAC ratio C={C_} L={L}: {ratios[(C_, L)]:.3f}")
    c.note(f"row-sum error {worst_sum:.1g}, MAC ratios " + ", ".join(f"C={a},L={b}: {r:.3f}" for (a, b), r in ratios.items()))
    c.finish(3, "TSSA correctness")


def test_4_gradient_integrity():
    c = Checks()
    rng = np.random.default_rng(4)
    errs = {}

    w = f64(rng.normal(size=(3, 2, 3)))
    b = f64(rng.normal(size=3))
    target = f64(rng.normal(size=(3, 5)))
    errs["conv1d input"] = T.finite_diff_check(
        lambda x: T.mse_loss(T.conv1d(x, w, b, stride=2, padding=1), target), f64(rng.normal(size=(2, 10))))
    x0 = f64(rng.normal(size=(2, 10)))
    errs["conv1d weight"] = T.finite_diff_check(
        lambda ww: T.mse_loss(T.conv1d(x0, ww, b, stride=2, padding=1), target), w)

    s0 = rng.normal(size=(8, 8))
    wts = f64(rng.normal(size=(8, 8)))
    # finite differences only see retained entries: masked ones have zero analytic and numeric slope
    errs["masked softmax"] = T.finite_diff_check(lambda s: T.sum_all(T.mul(T.softmax_rows(max_e_mask(s, 50)), wts)),
                                                 f64(s0))

    gcu = SAGCU(4, rng=np.random.default_rng(5), dtype=np.float64)
    tgt = f64(rng.normal(size=(4, 12)))
    errs["SA-GCU"] = T.finite_diff_check(lambda x: T.mse_loss(gcu(x), tgt), f64(rng.normal(size=(4, 12))))

    cfg = C.ModelConfig(stage_channels=(4, 8, 8, 8), window_length=32, head_hidden=(8,), seed=6)
    m = RepILN(cfg, dtype=np.float64).train()
    y = f64(rng.normal(size=(2, 2)))
    errs["model input"] = T.finite_diff_check(lambda x: T.mse_loss(m(x), y), f64(rng.normal(size=(2, 6, 32))))
    xin = f64(rng.normal(size=(2, 6, 32)))
    gcu_w = m.blocks[3].gcu.value_point

    def via_weight(wv):
        saved = gcu_w.weight
        gcu_w.weight = wv
        try:
            return T.mse_loss(m(xin), y)
        finally:
            gcu_w.weight = saved

    errs["model weight"] = T.finite_diff_check(via_weight, f64(gcu_w.weight.data))
    for name, err in errs.items():
        c.check(err <= 1e-3, f"{name} relative error {err:.3g}")
    c.note(", ".join(f"{k} {v:.1g}" for k, v in errs.items()))
    c.finish(4, "gradient integrity")


def test_5_metric_oracles():
    c = Checks()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        pred, gt = random_pair(rng)
        delta = float(rng.uniform(1, 40))
        worst = max(worst, abs(ate(pred, gt) - brute_ate(pred, gt)), abs(rte(pred, gt, delta) - brute_rte(pred, gt, delta)))
    c.check(worst <= 1e-9, f"brute-force gap {worst:.3g}")

    t = np.arange(0, 180.0, 0.5)
    gt = Trajectory(t, np.vstack([np.cos(t / 20), np.sin(t / 30)]) * 10)
    off = Trajectory(t, gt.position + np.array([[3.0], [-4.0]]))
    c.check(abs(ate(off, gt) - 5.0) <= 1e-9, "offset ATE")
    c.check(abs(rte(off, gt)) <= 1e-9, "offset RTE")
    u = np.array([[0.01], [0.02]])
    drift = Trajectory(t, gt.position + u * t)
    c.check(abs(rte(drift, gt, 60.0) - np.linalg.norm(u) * 60) <= 1e-9, "drift RTE")
    c.note(f"max gap {worst:.1g}")
    c.finish(5, "metric oracles")


def test_6_desk_scale_learning():
    c = Checks()
    start = time.perf_counter()
    records = synthetic_corpus(64, duration=10.0, motion="mixed", seed=0, gyro_noise=0.01, accel_noise=0.05)
    train_recs, val_recs, _ = split_sequences(records, seed=0)
    tests = synthetic_corpus(4, duration=30.0, motion="straight", seed=1000, gyro_noise=0.01,
                             accel_noise=0.05, prefix="held")
    mc = C.ModelConfig(stage_channels=(8, 16, 16, 16), window_length=64, head_hidden=(32,), seed=0)
    tc = C.TrainConfig(max_epochs=10, batch_size=32, window_stride=32, seed=0)
    model = RepILN(mc)
    fit(model, train_recs, val_recs, tc)
    rep_train = evaluate(model, tests)
    rep_deploy = evaluate(fuse_model(model), tests)
    for a, b in zip(rep_train.sequences, rep_deploy.sequences):
        c.check(a.ate <= 0.1 * a.length, f"{a.name} ATE {a.ate:.3f} m over {a.length:.1f} m")
        c.check(abs(a.ate - b.ate) <= 1e-3, f"{a.name} train/deploy ATE gap {abs(a.ate - b.ate):.3g}")
    elapsed = time.perf_counter() - start
    c.check(elapsed < 600, f"runtime {elapsed:.0f}s")
    worst = max(s.ate / s.length for s in rep_train.sequences)
    gap = max(abs(a.ate - b.ate) for a, b in zip(rep_train.sequences, rep_deploy.sequences))
    c.note(f"worst ATE {100 * worst:.1f}% of length, fused gap {gap:.1g} m, {elapsed:.0f}s")
    c.finish(6, "desk-scale learning")


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_7_determinism_and_persistence(tmp_path):
    c = Checks()
    for d in ("a", "b"):
        write_dataset(tmp_path / d, synthetic_corpus(5, duration=4.0, motion="random-turn", seed=9,
                                                     gyro_noise=0.02, accel_noise=0.1))
    c.check(_digest(tmp_path / "a") == _digest(tmp_path / "b"), "dataset trees differ")

    records = synthetic_corpus(6, duration=4.0, seed=3)
    mc = C.ModelConfig(stage_channels=(4, 8, 8, 8), window_length=32, head_hidden=(8,), seed=3)
    tc = C.TrainConfig(initial_lr=1e-3, max_epochs=3, batch_size=16, window_stride=16, seed=3)
    models = []
    for name in ("h1", "h2"):
        m = RepILN(mc)
        fit(m, records[:4], records[4:], tc, history_path=tmp_path / name)
        models.append(m)
    c.check((tmp_path / "h1").read_bytes() == (tmp_path / "h2").read_bytes(), "history files differ")
    c.check(checkpoint_bytes(models[0]) == checkpoint_bytes(models[1]), "final weights differ")

    save_checkpoint(models[0], tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(0).normal(size=(8, 6, 32))
    c.check(back.predict(x).tobytes() == models[0].predict(x).tobytes(), "reloaded predictions differ")
    d = fuse_model(models[0])
    save_checkpoint(d, tmp_path / "d.ckpt")
    c.check(load_checkpoint(tmp_path / "d.ckpt").predict(x).tobytes() == d.predict(x).tobytes(),
            "reloaded deploy predictions differ")
    c.finish(7, "determinism and persistence")


def test_8_early_stop_contract():
    c = Checks()
    rng = np.random.default_rng(8)
    x, y = rng.normal(size=(8, 6, 16)), np.tile([1.0, 0.0], (8, 1))
    mc = C.ModelConfig(stage_channels=(4, 4, 4, 4), window_length=16, head_hidden=(4,))
    res = train(RepILN(mc), (x, y), (x, y), C.TrainConfig(batch_size=8), val_loss_fn=lambda m: 1.0)
    lrs = [r.lr for r in res.history]
    c.check(min(lrs) >= 1e-6 * (1 - 1e-9), f"an epoch ran at lr {min(lrs):.3g}")
    c.check(len(lrs) <= 100, f"{len(lrs)} epochs")
    c.check(res.stop_reason == "lr_floor", f"stop reason {res.stop_reason}")
    c.note(f"plateau: {len(lrs)} epochs, last lr {lrs[-1]:.1g}")

    # a loss that keeps improving never triggers decay, so the epoch cap ends the run
    counter = iter(range(1000, 0, -1))
    res = train(RepILN(mc), (x, y), (x, y), C.TrainConfig(batch_size=8), val_loss_fn=lambda m: float(next(counter)))
    c.check(len(res.history) == 100 and res.stop_reason == "max_epochs", f"cap run had {len(res.history)} epochs")
    c.finish(8, "early-stop contract")
