from dataclasses import dataclass, field
from typing import Collection, Dict, Mapping, Optional, Set, Tuple
import math

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class OptimState:
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "OptimState":
        """パラメータと同じ形状のモーメントを 0 で用意する"""
        return cls(
            exp_avg={name: np.zeros_like(p.data) for name, p in params.items()},
            exp_avg_sq={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState,
               lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.05, no_decay: Collection[str] = ()) -> OptimState:
    """decoupled weight decay 付き Adam の 1 ステップ (パラメータはその場で更新)

    no_decay に名前のあるパラメータは減衰させない。
    """
    beta1, beta2 = betas
    step = state.step + 1
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    for name, param in params.items():
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(param.data)
            state.exp_avg_sq[name] = np.zeros_like(param.data)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        grad = grads.get(name)
        if grad is None:
            # 逆伝播で到達しなかったパラメータは勾配 0 として扱う
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape or m.shape != param.shape:
            raise ShapeError(f"adamw_step: shape mismatch for {name}", param.shape, grad.shape)
        decay = 0.0 if name in no_decay else weight_decay
        data = param.data * (1.0 - lr * decay)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        denom = np.sqrt(v / bias2) + eps
        data = data - lr * (m / bias1) / denom
        param.data = data.astype(param.data.dtype, copy=False)
        state.exp_avg[name] = m.astype(param.data.dtype, copy=False)
        state.exp_avg_sq[name] = v.astype(param.data.dtype, copy=False)
    state.step = step
    return state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """全勾配のノルムが max_norm を超えたら一様に縮める。クリップ前のノルムを返す"""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    scale = max_norm / (total + 1e-6)
    if scale < 1.0:
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype, copy=False)
    return total


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float,
              min_lr: float = 1e-6) -> float:
    """線形ウォームアップ後に半周期コサインで min_lr まで減衰させる"""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ContractError(f"warmup_steps {warmup_steps} must be below total_steps {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def warmup_steps_for(warmup_epochs: int, epochs: int, steps_per_epoch: int) -> int:
    """短い実行でもウォームアップが全体を超えないよう切り詰める"""
    return min(warmup_epochs, max(epochs - 1, 0)) * steps_per_epoch


def no_decay_names(params: Mapping[str, Tensor], extra: Collection[str] = ()) -> Set[str]:
    """1 次元のパラメータ (バイアスと LayerNorm) と extra を減衰の対象から外す"""
    return {name for name, p in params.items() if p.ndim < 2 or name in extra}
