"""numpy 上に載せた最小限のリバースモード自動微分"""
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import math

import numpy as np

from .errors import ContractError, ShapeError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32

GELU_COEFF = math.sqrt(2.0 / math.pi)


def set_precision(name: str) -> None:
    """Tensor データの精度をプロセス全体で切り替える"""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"Unsupported precision: {name}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return "float64" if _dtype == np.float64 else "float32"


@contextmanager
def precision(name: str) -> Iterator[None]:
    """一時的に精度を切り替えるコンテキストマネージャ"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    parents: Tuple["Tensor", ...]
    grad_fn: GradFn


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    # ndarray との二項演算で Tensor 側の演算子を優先させる
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self) -> Dict[str, np.ndarray]:
        return backward(self)

    # 演算子
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis, keepdims)
    def max(self, axis: int, keepdims: bool = False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
    def swapaxes(self, a: int, b: int): return swapaxes(self, a, b)


def parameter(data, name: str) -> Tensor:
    """学習対象の葉テンソルを作る"""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn: GradFn) -> Tensor:
    """任意の前向き計算と勾配関数から計算グラフのノードを作る"""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op=op, parents=tuple(parents), grad_fn=grad_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: operands do not broadcast", a.shape, b.shape) from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


# 要素ごとの二項演算

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return custom_op(a.data + b.data, (a, b), "add",
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return custom_op(a.data - b.data, (a, b), "sub",
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return custom_op(a.data * b.data, (a, b), "mul",
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return custom_op(
        a.data / b.data, (a, b), "div",
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return custom_op(a.data ** exponent, (a,), "pow",
                     lambda g: (g * exponent * a.data ** (exponent - 1),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """バッチ次元をブロードキャストする行列積"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul: inner dimensions disagree", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul: batch dimensions do not broadcast", a.shape, b.shape) from None

    def grad_fn(g):
        return (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return custom_op(a.data @ b.data, (a, b), "matmul", grad_fn)


def patchwise_matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(..., k, in) の各 k×in 行列に (in, out) を掛ける

    先頭の次元ごとに同じ形の行列積を 1 回ずつ行うので、結果は先頭の次元の大きさによらずビット一致する。
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("patchwise_matmul: expected (..., k, in) and (in, out)", a.shape, b.shape)
    lead = a.shape[:-2]
    out = np.empty((*lead, a.shape[-2], b.shape[1]), dtype=np.result_type(a.data, b.data))
    for idx in np.ndindex(*lead):
        out[idx] = np.ascontiguousarray(a.data[idx]) @ b.data

    def grad_fn(g):
        flat_a = a.data.reshape(-1, a.shape[-1])
        flat_g = g.reshape(-1, b.shape[1])
        return g @ b.data.T, flat_a.T @ flat_g

    return custom_op(out, (a, b), "patchwise_matmul", grad_fn)


# 縮約

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / max(count, 1))


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """最大値。勾配は最初に現れる最大要素へ流す"""
    axis = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return custom_op(out if keepdims else np.squeeze(out, axis), (a,), "max", grad_fn)


# 形状操作

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape: incompatible shape", a.shape, tuple(shape)) from None
    return custom_op(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), "transpose",
                     lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, first: int, second: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def index_select(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(a.data[index], (a,), "index", grad_fn)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """a[b, indices[b, j]] をバッチごとに集める (a: B×N×..., indices: B×M)"""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or indices.shape[0] != a.shape[0]:
        raise ShapeError("gather_rows: index batch does not match", a.shape, indices.shape)
    rows = np.arange(a.shape[0])[:, None]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, indices), g)
        return (full,)

    return custom_op(a.data[rows, indices], (a,), "gather_rows", grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: shapes disagree", *[t.shape for t in tensors]) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to: cannot broadcast", a.shape, shape) from None
    return custom_op(out, (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


# 要素ごとの単項演算

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return custom_op(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sin(a: Tensor) -> Tensor:
    return custom_op(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return custom_op(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return custom_op(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    return custom_op(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def gelu(a: Tensor) -> Tensor:
    """tanh 近似の GELU"""
    x = a.data
    inner = GELU_COEFF * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = GELU_COEFF * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return custom_op(out, (a,), "gelu", grad_fn)


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    x = a.data
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    return custom_op(out, (a,), "smooth_l1", lambda g: (g * np.clip(x / beta, -1.0, 1.0),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """最大値を引いて安定化した softmax"""
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: invalid axis {axis}", a.shape)
    if a.data.size == 0:
        return custom_op(a.data.copy(), (a,), "softmax", lambda g: (g,))
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return custom_op(out, (a,), "softmax",
                     lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0:
        return custom_op(a.data.copy(), (a,), "log_softmax", lambda g: (g,))
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return custom_op(out, (a,), "log_softmax",
                     lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """最終次元で標準化してからアフィン変換する"""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError("layer_norm: width mismatch", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        g_xhat = g * gain.data
        dx = rstd * (g_xhat
                     - g_xhat.mean(axis=-1, keepdims=True)
                     - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True))
        return (dx,
                _unbroadcast((g * xhat).sum(axis=lead), gain.shape),
                _unbroadcast(g.sum(axis=lead), bias.shape))

    return custom_op(out, (x, gain, bias), "layer_norm", grad_fn)


def stop_gradient(x: Tensor) -> Tensor:
    """値はそのまま、逆伝播の記録を持たないテンソルを返す"""
    return Tensor(x.data.copy())


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy: logits/labels mismatch", logits.shape, labels.shape)
    logp = log_softmax(logits, axis=-1)
    picked = logp[(np.arange(labels.shape[0]), labels)]
    return -picked.mean()


# 逆伝播

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """スカラー損失から逆伝播し、名前付きパラメータの勾配を返す"""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    for tensor in order:
        tensor.grad = None
    pending = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(order):
        grad = pending.pop(id(tensor), None)
        if grad is None:
            continue
        tensor.grad = grad
        if tensor.node is None:
            continue
        for parent, parent_grad in zip(tensor.node.parents, tensor.node.grad_fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ShapeError(f"{tensor.node.op}: gradient shape mismatch", parent_grad.shape, parent.shape)
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return {
        tensor.name: tensor.grad
        for tensor in order
        if tensor.node is None and tensor.name is not None and tensor.grad is not None
    }
