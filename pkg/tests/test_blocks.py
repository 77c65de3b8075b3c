"""Text-vision state-space module, multimodal block and block stacking."""
import numpy as np
import pytest

from mambatrans.attention import ConfigError, MMCAConfig
from mambatrans.blocks import MMSSB, TVSSM, MMSSGConfig, mm_ssb, mm_ssg_stack, tv_ssm
from mambatrans.tensor import Tensor

C, LATENT, N = 4, 8, 2


def f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def make_block(rng):
    return MMSSB(rng, C, LATENT, N, MMCAConfig(C, 2)).to(np.float64)


def silence_branches(block):
    """Zero both output projections so only the scaled skip path remains."""
    for lin in (block.tv_ssm.out_proj, block.mmca.out_proj):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0


def layer_norm_ref(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


@pytest.fixture
def feats(rng):
    return (f64(rng.standard_normal((3, 4, C))), f64(rng.standard_normal((3, 4, C))),
            f64(rng.standard_normal((5, C))), f64(rng.uniform(0, 1, (3, 4))))


def test_tv_ssm_shape_and_mask_check(rng, feats):
    F_I, F_mask, F_text, _ = feats
    w = TVSSM(rng, C, LATENT, N).to(np.float64)
    assert tv_ssm(F_I, F_mask, F_text, w).shape == (3, 4, C)
    with pytest.raises(ValueError):
        tv_ssm(F_I, f64(np.zeros((3, 3, C))), F_text, w)


def test_tv_ssm_zero_mask_gate_gives_bias(rng, feats):
    """silu(0) = 0 closes the gate, so LN sees zeros and the output is the projection bias."""
    F_I, F_mask, F_text, _ = feats
    w = TVSSM(rng, C, LATENT, N).to(np.float64)
    w.mask_in_proj.weight.data[...] = 0.0
    w.mask_in_proj.bias.data[...] = 0.0
    out = tv_ssm(F_I, F_mask, F_text, w)
    np.testing.assert_allclose(out.data, np.broadcast_to(w.out_proj.bias.data, (3, 4, C)), atol=1e-12)


def test_tied_scans_share_parameters(rng):
    w = TVSSM(rng, C, LATENT, N)
    w.tie_spatial_scans()
    assert all(s is w.spatial_scans[0] for s in w.spatial_scans)


class TestBlock:
    def test_shape_preserved(self, rng, feats):
        assert mm_ssb(*feats, make_block(rng)).shape == (3, 4, C)

    def test_silenced_branches_leave_scaled_skip(self, rng, feats):
        block = make_block(rng)
        silence_branches(block)
        out, z = mm_ssb(*feats, block, return_z=True)
        expected = layer_norm_ref(feats[0].data)
        np.testing.assert_allclose(z.data, expected, atol=1e-12)
        np.testing.assert_array_equal(out.data, z.data)

    def test_skip_scale_is_linear(self, rng, feats):
        block = make_block(rng)
        silence_branches(block)
        base = mm_ssb(*feats, block).data
        block.s.data[...] *= 2.0
        np.testing.assert_allclose(mm_ssb(*feats, block).data, 2.0 * base, atol=1e-12)

    def test_zero_target_mask_drops_attention(self, rng, feats):
        block = make_block(rng)
        F_I, F_mask, F_text, _ = feats
        out, z = mm_ssb(F_I, F_mask, F_text, f64(np.zeros((3, 4))), block, return_z=True)
        np.testing.assert_array_equal(out.data, z.data)

    def test_uses_every_input(self, rng, feats):
        block = make_block(rng)
        base = mm_ssb(*feats, block).data
        for i in range(4):
            moved = list(feats)
            moved[i] = f64(feats[i].data * 0.5 + 0.1)
            assert not np.allclose(mm_ssb(*moved, block).data, base), i


class TestStack:
    def test_depth_one_equals_single_block(self, rng, feats):
        block = make_block(rng)
        np.testing.assert_array_equal(
            mm_ssg_stack(*feats, MMSSGConfig(1, 1), [block]).data, mm_ssb(*feats, block).data)

    def test_blocks_applied_in_order(self, rng, feats):
        blocks = [make_block(rng), make_block(rng)]
        F_I, F_mask, F_text, mask = feats
        manual = mm_ssb(mm_ssb(F_I, F_mask, F_text, mask, blocks[0]), F_mask, F_text, mask, blocks[1])
        stacked = mm_ssg_stack(*feats, MMSSGConfig(1, 2), blocks)
        np.testing.assert_array_equal(stacked.data, manual.data)
        swapped = mm_ssg_stack(*feats, MMSSGConfig(2, 1), blocks[::-1])
        assert not np.allclose(swapped.data, stacked.data)

    def test_count_mismatch(self, rng, feats):
        with pytest.raises(ConfigError):
            mm_ssg_stack(*feats, MMSSGConfig(2, 2), [make_block(rng)])

    @pytest.mark.parametrize("bpg,groups", [(0, 1), (1, 0)])
    def test_config_positive(self, bpg, groups):
        with pytest.raises(ConfigError):
            MMSSGConfig(bpg, groups)

    def test_depth(self):
        assert MMSSGConfig(3, 2).depth == 6
