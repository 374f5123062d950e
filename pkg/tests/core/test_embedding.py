import os
import sys

import numpy as np
import pytest

BASE_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
sys.path.insert(0, os.path.join(BASE_DIR, "src"))
from pcp_mae.core.embedding import EmbedWeights, mini_pointnet, pem, sincos_pe, sincos_pe_tensor
from pcp_mae.core.errors import ContractError, ShapeError
from pcp_mae.core.gradcheck import numerical_gradient, relative_error
from pcp_mae.core.tensor import Tensor, backward, parameter, precision


@pytest.mark.parametrize("dim", [6, 96, 384])
def test_sincos_zero_center_and_range(dim):
    pe = sincos_pe(np.zeros((1, 3)), dim)
    assert pe.shape == (1, dim)
    expected = np.tile([0.0, 1.0], dim // 2)
    np.testing.assert_array_equal(pe[0], expected)
    random = sincos_pe(np.random.default_rng(0).uniform(-5, 5, size=(10, 3)), dim)
    assert random.shape == (10, dim)
    assert np.all(np.abs(random) <= 1.0)


def test_sincos_layout_is_xyz_blocks():
    dim = 12
    pe = sincos_pe(np.array([[0.0, 1.0, 0.0]]), dim)[0]
    np.testing.assert_array_equal(pe[:4], [0.0, 1.0, 0.0, 1.0])
    np.testing.assert_array_equal(pe[8:], [0.0, 1.0, 0.0, 1.0])
    omega = np.exp(2.0 * np.arange(1, 3) / 2)
    np.testing.assert_allclose(pe[4:8], [np.sin(1 / omega[0]), np.cos(1 / omega[0]),
                                         np.sin(1 / omega[1]), np.cos(1 / omega[1])])


def test_sincos_rejects_bad_width():
    with pytest.raises(ContractError):
        sincos_pe(np.zeros((2, 3)), 8)
    with pytest.raises(ShapeError):
        sincos_pe(np.zeros((2, 2)), 12)


def test_sincos_tensor_matches_numpy_and_has_gradients():
    rng = np.random.default_rng(1)
    with precision("float64"):
        centers = parameter(rng.normal(size=(2, 3, 3)), "centers")
        np.testing.assert_allclose(sincos_pe_tensor(centers, 18).data, sincos_pe(centers.data, 18), atol=1e-12)
        weights = rng.normal(size=(2, 3, 18))
        loss_fn = lambda: (sincos_pe_tensor(centers, 18) * weights).sum()
        grads = backward(loss_fn())
        assert relative_error(grads["centers"], numerical_gradient(loss_fn, centers)) < 1e-4


def test_mini_pointnet_is_permutation_invariant_within_patch():
    rng = np.random.default_rng(2)
    with precision("float64"):
        weights = EmbedWeights(12, rng, hidden=8)
        patches = rng.normal(size=(2, 3, 5, 3))
        tokens = mini_pointnet(patches, weights)
        shuffled = patches[:, :, rng.permutation(5)]
        np.testing.assert_allclose(mini_pointnet(shuffled, weights).data, tokens.data, atol=1e-12)
    assert tokens.shape == (2, 3, 12)
    with pytest.raises(ShapeError):
        mini_pointnet(np.zeros((2, 5, 3)), weights)


def test_pem_gradient_and_width_check():
    rng = np.random.default_rng(3)
    with precision("float64"):
        weights = EmbedWeights(6, rng, hidden=4)
        pe = sincos_pe(rng.normal(size=(2, 4, 3)), 6)
        target = rng.normal(size=(2, 4, 6))
        loss_fn = lambda: ((pem(pe, weights) - target) ** 2).mean()
        grads = backward(loss_fn())
        w = weights.pem_fc1.weight
        assert relative_error(grads[w.name], numerical_gradient(loss_fn, w)) < 1e-4
    with pytest.raises(ShapeError):
        pem(Tensor(np.zeros((2, 4, 12))), weights)


def test_param_counts_match_instances():
    weights = EmbedWeights(24, np.random.default_rng(0), hidden=16)
    assert sum(p.size for p in weights.pointnet_parameters()) == EmbedWeights.pointnet_param_count(24, 16)
    assert sum(p.size for p in weights.pem_parameters()) == EmbedWeights.pem_param_count(24)


def test_sincos_closed_form_for_width_six():
    pe = sincos_pe(np.array([[1.0, 1.0, 1.0]]), 6)[0]
    block = [np.sin(np.exp(-2.0)), np.cos(np.exp(-2.0))]
    np.testing.assert_allclose(pe, block * 3, rtol=1e-15)


def test_sincos_is_injective_on_sampled_centers():
    centers = np.random.default_rng(4).uniform(-1, 1, size=(1500, 3))
    pe = sincos_pe(centers, 384)
    sq = (pe * pe).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * pe @ pe.T
    np.fill_diagonal(dist, np.inf)
    assert np.sqrt(max(dist.min(), 0.0)) > 1e-9


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_mini_pointnet_single_patch_matches_batch_exactly(dtype):
    rng = np.random.default_rng(5)
    with precision(dtype):
        weights = EmbedWeights(24, rng, hidden=16)
        patches = rng.normal(size=(4, 6, 8, 3))
        batched = mini_pointnet(patches, weights).data
        for i in range(4):
            for j in range(6):
                alone = mini_pointnet(patches[i:i + 1, j:j + 1], weights).data
                np.testing.assert_array_equal(alone[0, 0], batched[i, j])


def test_mini_pointnet_tokens_follow_patch_order():
    rng = np.random.default_rng(6)
    with precision("float64"):
        weights = EmbedWeights(12, rng, hidden=8)
        patches = rng.normal(size=(2, 5, 4, 3))
        order = rng.permutation(5)
        tokens = mini_pointnet(patches, weights).data
        np.testing.assert_array_equal(mini_pointnet(patches[:, order], weights).data, tokens[:, order])


def test_mini_pointnet_gradients():
    rng = np.random.default_rng(7)
    with precision("float64"):
        weights = EmbedWeights(6, rng, hidden=4)
        patches = parameter(rng.normal(size=(2, 2, 3, 3)), "patches")
        target = rng.normal(size=(2, 2, 6))
        loss_fn = lambda: ((mini_pointnet(patches, weights) - target) ** 2).sum()
        grads = backward(loss_fn())
        for tensor in (patches, weights.stage1.weight, weights.stage2.weight):
            assert relative_error(grads[tensor.name], numerical_gradient(loss_fn, tensor)) < 1e-4


def test_mini_pointnet_zero_patches_give_bias_tokens():
    rng = np.random.default_rng(8)
    with precision("float64"):
        weights = EmbedWeights(12, rng, hidden=8)
        tokens = mini_pointnet(np.zeros((1, 2, 4, 3)), weights).data
    np.testing.assert_array_equal(tokens[0, 0], tokens[0, 1])


def test_pem_with_zero_weights_is_zero():
    with precision("float64"):
        weights = EmbedWeights(12, np.random.default_rng(9), hidden=8)
        for layer in (weights.pem_fc1, weights.pem_fc2):
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
        out = pem(sincos_pe(np.random.default_rng(10).normal(size=(2, 3, 3)), 12), weights)
    np.testing.assert_array_equal(out.data, np.zeros((2, 3, 12)))


def test_pem_rows_do_not_depend_on_visible_or_masked_role():
    rng = np.random.default_rng(11)
    with precision("float64"):
        weights = EmbedWeights(12, rng, hidden=8)
        centers = rng.normal(size=(1, 6, 3))
        pe = sincos_pe(centers, 12)
        visible = pem(pe[:, :4], weights).data
        masked = pem(pe[:, 2:], weights).data
    # 行 2, 3 は両方に含まれる
    np.testing.assert_allclose(visible[0, 2:], masked[0, :2], rtol=0, atol=1e-15)
