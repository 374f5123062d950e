"""パッチのトークン化と中心座標の位置埋め込み"""
from typing import List, Union

import numpy as np

from .errors import ContractError, ShapeError
from .layers import Linear, linear_param_count
from .tensor import Tensor, as_tensor, broadcast_to, concat, cos, gelu, patchwise_matmul, relu, reshape, sin


def sincos_pe(centers: np.ndarray, dim: int) -> np.ndarray:
    """中心座標 (...×3) を x, y, z それぞれ D/3 幅の sin/cos 交互列にして連結する"""
    if dim % 6 != 0:
        raise ContractError(f"sin-cos embedding width must be divisible by 6, got {dim}")
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[-1] != 3:
        raise ShapeError("sincos_pe: centers must end with 3 coordinates", centers.shape)
    per_axis = dim // 6
    omega = np.exp(2.0 * np.arange(1, per_axis + 1) / per_axis)
    blocks = []
    for axis in range(3):
        angles = centers[..., axis:axis + 1] / omega
        pairs = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
        blocks.append(pairs.reshape(*angles.shape[:-1], 2 * per_axis))
    return np.concatenate(blocks, axis=-1)


def sincos_pe_tensor(centers: Tensor, dim: int) -> Tensor:
    """sincos_pe の微分可能版 (予測座標から位置埋め込みを作るときに使う)"""
    if dim % 6 != 0:
        raise ContractError(f"sin-cos embedding width must be divisible by 6, got {dim}")
    if centers.shape[-1] != 3:
        raise ShapeError("sincos_pe_tensor: centers must end with 3 coordinates", centers.shape)
    per_axis = dim // 6
    inv_omega = np.exp(-2.0 * np.arange(1, per_axis + 1) / per_axis)
    lead = centers.shape[:-1]
    blocks = []
    for axis in range(3):
        angles = centers[..., axis:axis + 1] * inv_omega
        pairs = concat([reshape(sin(angles), (*lead, per_axis, 1)),
                        reshape(cos(angles), (*lead, per_axis, 1))], axis=-1)
        blocks.append(reshape(pairs, (*lead, 2 * per_axis)))
    return concat(blocks, axis=-1)


class EmbedWeights:
    """mini-PointNet と PEM のパラメータ"""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 128):
        self.dim = dim
        self.hidden = hidden
        self.stage1 = Linear(3, hidden, "embed.pointnet.stage1", rng)
        self.stage2 = Linear(2 * hidden, dim, "embed.pointnet.stage2", rng)
        self.pem_fc1 = Linear(dim, dim, "embed.pem.fc1", rng)
        self.pem_fc2 = Linear(dim, dim, "embed.pem.fc2", rng)

    def pointnet_parameters(self) -> List[Tensor]:
        return self.stage1.parameters() + self.stage2.parameters()

    def pem_parameters(self) -> List[Tensor]:
        return self.pem_fc1.parameters() + self.pem_fc2.parameters()

    def parameters(self) -> List[Tensor]:
        return self.pointnet_parameters() + self.pem_parameters()

    @staticmethod
    def pointnet_param_count(dim: int, hidden: int = 128) -> int:
        return linear_param_count(3, hidden) + linear_param_count(2 * hidden, dim)

    @staticmethod
    def pem_param_count(dim: int) -> int:
        return 2 * linear_param_count(dim, dim)


def pem(pe_sincos: Union[Tensor, np.ndarray], weights: EmbedWeights) -> Tensor:
    """sin-cos 埋め込みを学習可能な 2 層 MLP でモデル空間へ写す"""
    x = as_tensor(pe_sincos)
    if x.shape[-1] != weights.dim:
        raise ShapeError("pem: input width mismatch", x.shape, (weights.dim,))
    return weights.pem_fc2(gelu(weights.pem_fc1(x)))


def _pointwise(layer: Linear, x: Tensor) -> Tensor:
    return patchwise_matmul(x, layer.weight) + layer.bias


def mini_pointnet(patches: Union[Tensor, np.ndarray], weights: EmbedWeights) -> Tensor:
    """B×n×k×3 の正規化パッチを B×n×D のトークンにする (k 点の並べ替えに不変)"""
    x = as_tensor(patches)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError("mini_pointnet: expected B×n×k×3 patches", x.shape)
    features = relu(_pointwise(weights.stage1, x))
    pooled = features.max(axis=2, keepdims=True)
    features = concat([broadcast_to(pooled, features.shape), features], axis=-1)
    return _pointwise(weights.stage2, features).max(axis=2)
