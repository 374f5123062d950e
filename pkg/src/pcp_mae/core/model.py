"""エンコーダ、重み共有の中心予測モジュール、デコーダ、再構成ヘッド"""
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple
import copy
import logging

import numpy as np

from ..config import ModelConfig
from .embedding import EmbedWeights
from .errors import ContractError, ShapeError
from .layers import (Block, LayerNorm, Linear, block_param_count, linear_param_count,
                     stack_blocks, trunc_normal, unique_parameters)
from .tensor import Tensor, broadcast_to, concat, parameter, relu, reshape
from .types import TargetMode

logger = logging.getLogger("pcp_mae.model")


class Projector:
    """中心予測ストリームの出力を目標空間へ写す (任意個のブロック → MLP → LN → ReLU → MLP)"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, out_features: int):
        self.blocks = stack_blocks(config.dim, config.heads, config.mlp_ratio, config.projector_depth,
                                   "projector.blocks", rng, config.attention_scale)
        self.fc1 = Linear(config.dim, config.dim, "projector.fc1", rng)
        self.norm = LayerNorm(config.dim, "projector.norm")
        self.fc2 = Linear(config.dim, out_features, "projector.fc2", rng)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x, _ = block.self_forward(x)
        return self.fc2(relu(self.norm(self.fc1(x))))

    def parameters(self) -> List[Tensor]:
        params = [p for block in self.blocks for p in block.parameters()]
        return params + self.fc1.parameters() + self.norm.parameters() + self.fc2.parameters()


class ModelWeights:
    """名前付きパラメータ一式。共有時の PCM ブロックはエンコーダのブロックそのもの"""

    def __init__(self, config: ModelConfig, seed: int = 0, share_pcm_weights: bool = True,
                 target_mode: str = TargetMode.PEM.value):
        config.validate()
        self.config = config
        self.share_pcm_weights = share_pcm_weights
        self.target_mode = target_mode
        rng = np.random.default_rng(seed)
        dim = config.dim
        self.embed = EmbedWeights(dim, rng, config.pointnet_hidden)
        self.encoder_blocks = stack_blocks(dim, config.heads, config.mlp_ratio, config.encoder_depth,
                                           "encoder.blocks", rng, config.attention_scale)
        self.encoder_norm = LayerNorm(dim, "encoder.norm")
        if share_pcm_weights:
            self.pcm_blocks = self.encoder_blocks
        else:
            self.pcm_blocks = stack_blocks(dim, config.heads, config.mlp_ratio, config.encoder_depth,
                                           "pcm.blocks", rng, config.attention_scale)
        self.projector = Projector(config, rng, 3 if target_mode == TargetMode.COORDS.value else dim)
        self.mask_token = parameter(trunc_normal(rng, (1, 1, dim)), "decoder.mask_token")
        self.decoder_blocks = stack_blocks(dim, config.heads, config.mlp_ratio, config.decoder_depth,
                                           "decoder.blocks", rng, config.attention_scale)
        self.decoder_norm = LayerNorm(dim, "decoder.norm")
        self.head = Linear(dim, 3 * config.group_size, "head", rng)
        logger.debug(f"Initialized model weights (seed={seed}, shared={share_pcm_weights}, target={target_mode})")

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, share_pcm_weights: bool = True,
                   target_mode: str = TargetMode.PEM.value) -> "ModelWeights":
        return cls(config, seed, share_pcm_weights, target_mode)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        """共有テンソルを 1 度だけ含む名前 → パラメータの辞書"""
        params = self.embed.parameters()
        for block in self.encoder_blocks:
            params += block.parameters()
        params += self.encoder_norm.parameters()
        for block in self.pcm_blocks:
            params += block.parameters()
        params += self.projector.parameters()
        params += self.decoder_parameters(include_pem=False)
        named = OrderedDict()
        for p in unique_parameters(params):
            if p.name in named:
                raise ContractError(f"Duplicate parameter name: {p.name}")
            named[p.name] = p
        return named

    def decoder_parameters(self, include_pem: bool = True) -> List[Tensor]:
        """デコーダ側だけで完結する経路のパラメータ"""
        params = (self.embed.pem_parameters() if include_pem else []) + [self.mask_token]
        for block in self.decoder_blocks:
            params += block.parameters()
        return params + self.decoder_norm.parameters() + self.head.parameters()

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """チェックポイントの配列を同名パラメータへ書き戻す"""
        named = self.named_parameters()
        missing = sorted(set(named) - set(arrays))
        unexpected = sorted(set(arrays) - set(named))
        if missing or unexpected:
            raise ContractError(f"Parameter names disagree: missing={missing}, unexpected={unexpected}")
        for name, param in named.items():
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"load_arrays: shape mismatch for {name}", value.shape, param.shape)
            param.data = value.astype(param.data.dtype)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.named_parameters().items())

    def clone(self) -> "ModelWeights":
        # deepcopy の memo により共有ブロックの同一性も保たれる
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def encoder_block_self(tokens: Tensor, block: Block) -> Tuple[Tensor, Tensor]:
    """可視トークン同士の自己注意ブロック"""
    if tokens.shape[-1] != block.dim:
        raise ShapeError("encoder_block_self: width mismatch", tokens.shape, (block.dim,))
    return block.self_forward(tokens)


def pcm_block_cross(pe_masked: Tensor, visible: Tensor, block: Block) -> Tuple[Tensor, Tensor]:
    """マスク側ストリームが (可視の層入力, 自分自身) に注意するクロス注意ブロック"""
    if pe_masked.shape[-1] != block.dim or visible.shape[-1] != block.dim:
        raise ShapeError("pcm_block_cross: width mismatch", pe_masked.shape, visible.shape)
    return block.cross_forward(pe_masked, visible)


def joint_forward(e_visible: Tensor, pe_visible: Tensor, e_masked: Tensor,
                  weights: ModelWeights) -> Tuple[Tensor, Tensor]:
    """エンコーダと PCM を層ごとに並走させ (T_v, 予測位置埋め込み) を返す

    PCM の i 層目はエンコーダ i 層目の入力 (i-1 層目の出力) を参照する。
    マスク側の値が可視側に流れ込むことはない。
    """
    if len(weights.pcm_blocks) != len(weights.encoder_blocks):
        raise ContractError(
            f"PCM depth {len(weights.pcm_blocks)} differs from encoder depth {len(weights.encoder_blocks)}")
    tokens = e_visible + pe_visible
    stream = e_masked
    for encoder_block, pcm_block in zip(weights.encoder_blocks, weights.pcm_blocks):
        previous = tokens
        tokens, _ = encoder_block_self(tokens, encoder_block)
        stream, _ = pcm_block_cross(stream, previous, pcm_block)
    return weights.encoder_norm(tokens), weights.projector(stream)


def encoder_forward(e_visible: Tensor, pe_visible: Tensor, weights: ModelWeights) -> Tensor:
    """PCM を伴わないエンコーダだけの順伝播 (分類の特徴抽出用)"""
    tokens = e_visible + pe_visible
    for block in weights.encoder_blocks:
        tokens, _ = encoder_block_self(tokens, block)
    return weights.encoder_norm(tokens)


def decoder_forward(t_visible: Tensor, pe_visible: Tensor, pe_masked: Tensor, mask_token: Tensor,
                    weights: ModelWeights, pos_every_block: Optional[bool] = None) -> Tensor:
    """[T_v + PE_v ; [M] + PE_m] 全体で自己注意し、末尾のマスク位置だけを返す

    pe_masked は呼び出し側で stop_gradient 済みのものを渡す。
    """
    if pos_every_block is None:
        pos_every_block = weights.config.decoder_pos_every_block
    batch, num_masked, dim = pe_masked.shape
    num_visible = t_visible.shape[1]
    if t_visible.shape != pe_visible.shape or t_visible.shape[0] != batch or t_visible.shape[2] != dim:
        raise ShapeError("decoder_forward: visible/masked streams disagree", t_visible.shape,
                         pe_visible.shape, pe_masked.shape)
    pos = concat([pe_visible, pe_masked], axis=1)
    x = concat([t_visible, broadcast_to(mask_token, (batch, num_masked, dim))], axis=1) + pos
    for i, block in enumerate(weights.decoder_blocks):
        if i > 0 and pos_every_block:
            x = x + pos
        x, _ = block.self_forward(x)
    x = weights.decoder_norm(x)
    return x[:, num_visible:, :]


def reconstruction_head(hidden: Tensor, head: Linear) -> Tensor:
    """B×mn×D → B×mn×k×3 の正規化パッチ座標"""
    if hidden.shape[-1] != head.in_features:
        raise ShapeError("reconstruction_head: width mismatch", hidden.shape, (head.in_features,))
    k = head.out_features // 3
    batch, tokens = hidden.shape[0], hidden.shape[1]
    return reshape(head(hidden), (batch, tokens, k, 3))


def param_breakdown(config: ModelConfig, share_pcm_weights: bool = True,
                    target_mode: str = TargetMode.PEM.value) -> "OrderedDict[str, int]":
    """構成要素ごとの解析的なパラメータ数"""
    dim = config.dim
    block = block_param_count(dim, config.mlp_ratio)
    projector_out = 3 if target_mode == TargetMode.COORDS.value else dim
    return OrderedDict([
        ("pointnet", EmbedWeights.pointnet_param_count(dim, config.pointnet_hidden)),
        ("pem", EmbedWeights.pem_param_count(dim)),
        ("encoder", config.encoder_depth * block),
        ("pcm", 0 if share_pcm_weights else config.encoder_depth * block),
        ("projector", config.projector_depth * block + linear_param_count(dim, dim)
         + 2 * dim + linear_param_count(dim, projector_out)),
        ("mask_token", dim),
        ("decoder", config.decoder_depth * block),
        ("head", linear_param_count(dim, 3 * config.group_size)),
        ("norms", 2 * 2 * dim),
    ])


def count_params(config: ModelConfig, share_pcm_weights: bool = True,
                 target_mode: str = TargetMode.PEM.value) -> int:
    return sum(param_breakdown(config, share_pcm_weights, target_mode).values())
