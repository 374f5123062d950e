import os
import sys

import numpy as np
import pytest

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(BASE_DIR, "src"))
from pcp_mae.config import ModelConfig
from pcp_mae.core.errors import ContractError, ShapeError
from pcp_mae.core.layers import block_param_count
from pcp_mae.core.model import (ModelWeights, count_params, decoder_forward, encoder_block_self,
                                encoder_forward, joint_forward, pcm_block_cross,
                                param_breakdown, reconstruction_head)
from pcp_mae.core.tensor import Tensor, precision


def tiny_config(**overrides) -> ModelConfig:
    values = dict(dim=24, encoder_depth=2, decoder_depth=2, heads=2, group_size=8, num_groups=4,
                  num_points=32, pointnet_hidden=8, mlp_ratio=2)
    values.update(overrides)
    return ModelConfig(**values)


def test_full_parameter_count():
    config = ModelConfig.full()
    shared = count_params(config, True)
    assert abs(shared - 29.5e6) / 29.5e6 < 0.10
    separate = count_params(config, False)
    assert separate - shared == 12 * block_param_count(384, 4)


@pytest.mark.parametrize("share", [True, False])
@pytest.mark.parametrize("target", ["pem", "sincos", "coords"])
def test_instance_matches_analytic_count(share, target):
    config = tiny_config(projector_depth=1)
    weights = ModelWeights(config, seed=0, share_pcm_weights=share, target_mode=target)
    assert weights.num_parameters() == count_params(config, share, target)
    assert sum(param_breakdown(config, share, target).values()) == count_params(config, share, target)


def test_shared_blocks_appear_once():
    weights = ModelWeights(tiny_config(), share_pcm_weights=True)
    assert weights.pcm_blocks is weights.encoder_blocks
    named = weights.named_parameters()
    ids = [id(p) for p in named.values()]
    assert len(ids) == len(set(ids))
    assert not any(name.startswith("pcm.") for name in named)
    for block in weights.encoder_blocks:
        for p in block.parameters():
            assert named[p.name] is p

    separate = ModelWeights(tiny_config(), share_pcm_weights=False).named_parameters()
    assert any(name.startswith("pcm.blocks.") for name in separate)


def test_clone_keeps_sharing_and_is_independent():
    weights = ModelWeights(tiny_config())
    clone = weights.clone()
    assert clone.pcm_blocks is clone.encoder_blocks
    clone.head.weight.data += 1.0
    assert not np.allclose(clone.head.weight.data, weights.head.weight.data)


def test_load_arrays_rejects_mismatched_names():
    weights = ModelWeights(tiny_config())
    arrays = dict(weights.arrays())
    arrays.pop("head.bias")
    with pytest.raises(ContractError):
        weights.load_arrays(arrays)
    shared_arrays = weights.arrays()
    with pytest.raises(ContractError):
        ModelWeights(tiny_config(), share_pcm_weights=False).load_arrays(shared_arrays)


def test_masked_inputs_do_not_reach_encoder_output():
    rng = np.random.default_rng(0)
    weights = ModelWeights(tiny_config())
    e_visible = Tensor(rng.normal(size=(2, 3, 24)))
    pe_visible = Tensor(rng.normal(size=(2, 3, 24)))
    t_a, pred_a = joint_forward(e_visible, pe_visible, Tensor(rng.normal(size=(2, 1, 24))), weights)
    t_b, pred_b = joint_forward(e_visible, pe_visible, Tensor(rng.normal(size=(2, 1, 24)) * 10), weights)
    np.testing.assert_array_equal(t_a.data, t_b.data)
    assert not np.array_equal(pred_a.data, pred_b.data)
    assert pred_a.shape == (2, 1, 24)


def test_joint_forward_depth_mismatch():
    weights = ModelWeights(tiny_config(), share_pcm_weights=False)
    weights.pcm_blocks = weights.pcm_blocks[:1]
    x = Tensor(np.zeros((1, 2, 24)))
    with pytest.raises(ContractError):
        joint_forward(x, x, Tensor(np.zeros((1, 2, 24))), weights)


def test_decoder_returns_masked_positions_only():
    rng = np.random.default_rng(1)
    with precision("float64"):
        weights = ModelWeights(tiny_config())
        t_visible = Tensor(rng.normal(size=(2, 3, 24)))
        pe_visible = Tensor(rng.normal(size=(2, 3, 24)))
        pe_masked = Tensor(rng.normal(size=(2, 2, 24)))
        out = decoder_forward(t_visible, pe_visible, pe_masked, weights.mask_token, weights)
        again = decoder_forward(t_visible, pe_visible, pe_masked, weights.mask_token, weights,
                                pos_every_block=True)
    assert out.shape == (2, 2, 24)
    assert not np.allclose(out.data, again.data)
    with pytest.raises(ShapeError):
        decoder_forward(t_visible, Tensor(np.zeros((2, 4, 24))), pe_masked, weights.mask_token, weights)


def test_zero_head_predicts_patch_centers():
    weights = ModelWeights(tiny_config())
    weights.head.weight.data[:] = 0.0
    weights.head.bias.data[:] = 0.0
    patches = reconstruction_head(Tensor(np.ones((2, 3, 24))), weights.head)
    assert patches.shape == (2, 3, 8, 3)
    assert np.all(patches.data == 0.0)


def _layer_norm(x, eps):
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)


def test_single_visible_token_attends_to_itself_only():
    weights = ModelWeights(tiny_config())
    token = Tensor(np.random.default_rng(2).normal(size=(1, 1, 24)))
    _, attention = encoder_block_self(token, weights.encoder_blocks[0])
    assert attention.shape == (1, 2, 1, 1)
    np.testing.assert_array_equal(attention.data, np.ones((1, 2, 1, 1)))


def test_cross_attention_two_keys_by_hand():
    rng = np.random.default_rng(3)
    with precision("float64"):
        weights = ModelWeights(tiny_config())
        block = weights.encoder_blocks[0]
        visible = rng.normal(size=(1, 1, 24))
        masked = rng.normal(size=(1, 1, 24))
        _, attention = pcm_block_cross(Tensor(masked), Tensor(visible), block)
    h_v = _layer_norm(visible[0, 0], block.norm1.eps)
    h_m = _layer_norm(masked[0, 0], block.norm1.eps)
    q = h_m @ block.w_q.data
    keys = np.stack([h_v, h_m]) @ block.w_k.data
    expected = []
    for head in range(2):
        cols = slice(12 * head, 12 * (head + 1))
        scores = keys[:, cols] @ q[cols] / np.sqrt(12.0)
        e = np.exp(scores - scores.max())
        expected.append(e / e.sum())
    assert attention.shape == (1, 2, 1, 2)
    np.testing.assert_allclose(attention.data[0, :, 0, :], np.array(expected), rtol=1e-10)


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(4)
    with precision("float64"):
        weights = ModelWeights(tiny_config())
        e_visible = rng.normal(size=(2, 5, 24))
        pe_visible = rng.normal(size=(2, 5, 24))
        order = rng.permutation(5)
        out = encoder_forward(Tensor(e_visible), Tensor(pe_visible), weights).data
        permuted = encoder_forward(Tensor(e_visible[:, order]), Tensor(pe_visible[:, order]), weights).data
    np.testing.assert_allclose(permuted, out[:, order], rtol=0, atol=1e-12)


def test_joint_forward_without_masked_patches_matches_encoder():
    rng = np.random.default_rng(5)
    weights = ModelWeights(tiny_config())
    e_visible = Tensor(rng.normal(size=(2, 4, 24)))
    pe_visible = Tensor(rng.normal(size=(2, 4, 24)))
    t_visible, pe_pred = joint_forward(e_visible, pe_visible, Tensor(np.zeros((2, 0, 24))), weights)
    np.testing.assert_array_equal(t_visible.data, encoder_forward(e_visible, pe_visible, weights).data)
    assert pe_pred.shape == (2, 0, 24)


def test_single_head_scales_agree():
    rng = np.random.default_rng(6)
    with precision("float64"):
        per_head = ModelWeights(tiny_config(heads=1, attention_scale="head_dim"), seed=0)
        full = ModelWeights(tiny_config(heads=1, attention_scale="full_dim"), seed=0)
        tokens = rng.normal(size=(1, 3, 24))
        out_a, attn_a = encoder_block_self(Tensor(tokens), per_head.encoder_blocks[0])
        out_b, attn_b = encoder_block_self(Tensor(tokens), full.encoder_blocks[0])
    assert attn_a.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(attn_a.data, attn_b.data)
    np.testing.assert_array_equal(out_a.data, out_b.data)


def test_shared_pcm_sees_encoder_weight_updates():
    weights = ModelWeights(tiny_config())
    for i, block in enumerate(weights.encoder_blocks):
        block.w_q.data[0, 0] = 123.0 + i
        assert weights.pcm_blocks[i].w_q.data[0, 0] == 123.0 + i
        assert weights.pcm_blocks[i].w_q is block.w_q
    separate = ModelWeights(tiny_config(), share_pcm_weights=False)
    separate.encoder_blocks[0].w_q.data[0, 0] = 123.0
    assert separate.pcm_blocks[0].w_q.data[0, 0] != 123.0
