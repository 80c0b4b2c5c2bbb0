import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from repiln import config as C
from repiln.model import (DEPLOY, TRAIN, CheckpointError, InputStats, RepILN, checkpoint_bytes,
                          checkpoint_from_bytes, count_flops, count_params, fuse_model, load_checkpoint,
                          save_checkpoint)
from repiln.nn import Conv1d
from repiln.repblock import FusedRepBlock, RepBlock
from repiln.tensor import Tensor

from conftest import randomize_norms

TINY = dict(stage_channels=(4, 8, 8, 8), window_length=32, head_hidden=(16,))


def tiny(**kw):
    return C.ModelConfig(**{**TINY, **kw})


def expected_params(cfg: C.ModelConfig) -> int:
    """Closed-form trainable parameter count of the train-form network."""
    def rep(ci, co, stride):
        n = co * ci * 3 + co + co * ci + co
        if cfg.norm_enabled:
            n += 2 * co * (3 if ci == co and stride == 1 else 2)
        return n

    def gcu(c):
        h = max(1, int(round(c * cfg.expansion_ratio)))
        n = (c * h + h) + (3 * h + h) + (c * h + h) + 3 * ((h * h + h) + (3 * h + h)) + (h * c + c)
        return n + (2 * c if cfg.gcu_prenorm else 0)

    total = rep(cfg.in_channels, cfg.stage_channels[0], 1)
    width = cfg.stage_channels[0]
    for co, nb, s in zip(cfg.stage_channels, cfg.blocks_per_stage, cfg.stage_strides):
        for i in range(nb):
            last = i == nb - 1
            out, stride = (co, s) if last else (width, 1)
            total += rep(width, out, stride) + gcu(out)
            width = out
    total += rep(width, width, 1)
    dims = [width, *cfg.head_hidden, cfg.out_dim]
    total += sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    return total


def test_conv_param_count():
    assert count_params(Conv1d(2, 3, 3)) == 21


def test_conv_macs():
    assert Conv1d(1, 1, 3, padding=1).macs(4) == 12


def test_default_config_shapes_and_counts():
    cfg = C.ModelConfig()
    m = RepILN(cfg)
    assert cfg.stage_lengths() == [200, 100, 50, 25]
    feats = m.features(Tensor(np.zeros((6, 200), dtype=np.float32)))
    stage_ends = np.cumsum(cfg.blocks_per_stage)
    lengths = [feats[i].shape[-1] for i in stage_ends]
    assert lengths == [200, 100, 50, 25]
    assert feats[-1].shape == (256, 25)
    assert count_params(m) == expected_params(cfg)
    d = fuse_model(m)
    assert count_params(d) < count_params(m)
    assert 10 <= 100 * (count_params(m) - count_params(d)) / count_params(m) <= 20


@pytest.mark.parametrize("kw", [{}, {"norm_enabled": False}, {"expansion_ratio": 2.0},
                                {"gcu_prenorm": True}, {"blocks_per_stage": (1, 3, 1, 2)}])
def test_closed_form_param_count(kw):
    cfg = tiny(**kw)
    assert count_params(RepILN(cfg)) == expected_params(cfg)


def test_zero_head_gives_zero_output():
    m = RepILN(tiny())
    m.head[-1].weight.data[:] = 0
    out = m(Tensor(np.random.default_rng(0).normal(size=(6, 32)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, [0, 0])


def test_batch_equals_loop():
    m = randomize_norms(RepILN(tiny()), np.random.default_rng(1)).eval()
    x = np.random.default_rng(2).normal(size=(3, 6, 32)).astype(np.float32)
    batched = m(Tensor(x)).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], m(Tensor(x[i])).data)


def test_output_finite_and_shaped():
    m = RepILN(tiny()).eval()
    out = m(Tensor(np.random.default_rng(0).normal(size=(5, 6, 32)).astype(np.float32)))
    assert out.shape == (5, 2) and np.all(np.isfinite(out.data))


def test_bad_input_shape():
    with pytest.raises(ValueError):
        RepILN(tiny())(Tensor(np.zeros((5, 32), dtype=np.float32)))


def test_fuse_structure():
    m = RepILN(tiny())
    d = fuse_model(m)
    assert d.mode == DEPLOY and m.mode == TRAIN
    assert not any(isinstance(mod, RepBlock) for mod in d.modules())
    assert all(isinstance(r, FusedRepBlock) for r in d.rep_blocks())
    with pytest.raises(ValueError):
        fuse_model(d)


def test_flops_fused_vs_train_and_growth():
    m = RepILN(tiny())
    d = fuse_model(m)
    assert count_flops(d) < count_flops(m)
    # attention terms make growth in L superlinear
    assert count_flops(d, 64) > 2 * count_flops(d, 32)


@given(st.sampled_from([4, 8]), st.sampled_from([16, 32]), st.integers(0, 1000))
@settings(max_examples=8, deadline=None)
def test_whole_model_fusion_64bit(c, L, seed):
    cfg = C.ModelConfig(stage_channels=(c, c, c, c), window_length=L, head_hidden=(8,), seed=seed)
    rng = np.random.default_rng(seed)
    m = randomize_norms(RepILN(cfg, dtype=np.float64), rng).eval()
    d = fuse_model(m)
    x = Tensor(rng.normal(size=(4, 6, L)), dtype=np.float64)
    assert np.max(np.abs(m(x).data - d(x).data)) <= 1e-10


class TestCheckpoint:
    def model(self):
        m = randomize_norms(RepILN(tiny(seed=5)), np.random.default_rng(5))
        m.input_stats = InputStats(np.arange(6, dtype=np.float64), np.linspace(1, 2, 6))
        return m

    def test_roundtrip_bit_exact(self, tmp_path):
        m = self.model()
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        x = np.random.default_rng(0).normal(size=(4, 6, 32))
        assert back.config == m.config and back.mode == TRAIN
        np.testing.assert_array_equal(back.predict(x), m.predict(x))
        assert checkpoint_bytes(back) == checkpoint_bytes(m)

    def test_deploy_roundtrip(self, tmp_path):
        d = fuse_model(self.model())
        save_checkpoint(d, tmp_path / "d.ckpt")
        back = load_checkpoint(tmp_path / "d.ckpt")
        x = np.random.default_rng(1).normal(size=(2, 6, 32))
        assert back.mode == DEPLOY
        np.testing.assert_array_equal(back.predict(x), d.predict(x))

    def test_mode_mismatch(self):
        raw = checkpoint_bytes(fuse_model(self.model()))
        with pytest.raises(CheckpointError, match="deploy"):
            checkpoint_from_bytes(raw, mode=TRAIN)

    def test_bad_magic_names_offset(self):
        raw = bytearray(checkpoint_bytes(self.model()))
        raw[:4] = b"NOPE"
        with pytest.raises(CheckpointError, match="offset 0"):
            checkpoint_from_bytes(bytes(raw))

    def test_truncated(self):
        raw = checkpoint_bytes(self.model())
        for cut in (3, 10, len(raw) // 2, len(raw) - 1):
            with pytest.raises(CheckpointError):
                checkpoint_from_bytes(raw[:cut])
