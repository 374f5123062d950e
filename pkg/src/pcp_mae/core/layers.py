"""Transformer ブロックなどの学習可能な部品"""
from typing import List, Optional, Tuple
import math

import numpy as np

from .tensor import (Tensor, concat, gelu, layer_norm, matmul, parameter, reshape, softmax,
                     swapaxes)
from .types import AttentionScale


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Linear:
    def __init__(self, in_features: int, out_features: int, name: str, rng: np.random.Generator,
                 bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = parameter(xavier_uniform(rng, in_features, out_features), f"{name}.weight")
        self.bias = parameter(np.zeros(out_features), f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class LayerNorm:
    def __init__(self, dim: int, name: str, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim), f"{name}.gain")
        self.bias = parameter(np.zeros(dim), f"{name}.bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self) -> List[Tensor]:
        return [self.gain, self.bias]


class Block:
    """pre-norm の Transformer ブロック (自己注意とクロス注意の両方で使う)"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, name: str, rng: np.random.Generator,
                 attention_scale: str = AttentionScale.HEAD_DIM.value):
        self.name = name
        self.dim = dim
        self.heads = heads
        scale_dim = dim // heads if attention_scale == AttentionScale.HEAD_DIM.value else dim
        self.scale = 1.0 / math.sqrt(scale_dim)
        self.norm1 = LayerNorm(dim, f"{name}.norm1")
        self.w_q = parameter(xavier_uniform(rng, dim, dim), f"{name}.attn.w_q")
        self.w_k = parameter(xavier_uniform(rng, dim, dim), f"{name}.attn.w_k")
        self.w_v = parameter(xavier_uniform(rng, dim, dim), f"{name}.attn.w_v")
        self.proj = Linear(dim, dim, f"{name}.attn.proj", rng)
        self.norm2 = LayerNorm(dim, f"{name}.norm2")
        self.fc1 = Linear(dim, dim * mlp_ratio, f"{name}.mlp.fc1", rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, f"{name}.mlp.fc2", rng)

    def parameters(self) -> List[Tensor]:
        params = self.norm1.parameters() + [self.w_q, self.w_k, self.w_v] + self.proj.parameters()
        return params + self.norm2.parameters() + self.fc1.parameters() + self.fc2.parameters()

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, tokens, _ = x.shape
        return swapaxes(reshape(x, (batch, tokens, self.heads, self.dim // self.heads)), 1, 2)

    def attend(self, queries: Tensor, context: Tensor) -> Tuple[Tensor, Tensor]:
        """queries (B×Nq×D) が context (B×Nk×D) に注意する。出力と注意重み (B×h×Nq×Nk) を返す"""
        q = self._split_heads(matmul(queries, self.w_q))
        k = self._split_heads(matmul(context, self.w_k))
        v = self._split_heads(matmul(context, self.w_v))
        weights = softmax(matmul(q, swapaxes(k, -1, -2)) * self.scale, axis=-1)
        out = swapaxes(matmul(weights, v), 1, 2)
        batch, tokens = queries.shape[0], queries.shape[1]
        return self.proj(reshape(out, (batch, tokens, self.dim))), weights

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def self_forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.norm1(x)
        attn_out, weights = self.attend(h, h)
        x = x + attn_out
        return x + self.mlp(self.norm2(x)), weights

    def cross_forward(self, queries: Tensor, visible: Tensor) -> Tuple[Tensor, Tensor]:
        """queries 側の流れだけを更新する。キー/値は visible と queries を連結したもの"""
        h = self.norm1(queries)
        context = concat([self.norm1(visible), h], axis=1)
        attn_out, weights = self.attend(h, context)
        x = queries + attn_out
        return x + self.mlp(self.norm2(x)), weights


def block_param_count(dim: int, mlp_ratio: int) -> int:
    hidden = dim * mlp_ratio
    return (2 * dim) * 2 + 3 * dim * dim + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)


def linear_param_count(in_features: int, out_features: int, bias: bool = True) -> int:
    return in_features * out_features + (out_features if bias else 0)


def stack_blocks(dim: int, heads: int, mlp_ratio: int, depth: int, prefix: str,
                 rng: np.random.Generator, attention_scale: str) -> List[Block]:
    return [Block(dim, heads, mlp_ratio, f"{prefix}.{i}", rng, attention_scale) for i in range(depth)]


def unique_parameters(params: List[Tensor], seen: Optional[set] = None) -> List[Tensor]:
    """同一オブジェクトを 1 度だけ残す"""
    seen = set() if seen is None else seen
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out
