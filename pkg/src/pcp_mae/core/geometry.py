"""点群の基盤処理: サンプリング、グルーピング、Chamfer 距離、データ拡張、合成形状"""
from typing import Callable, Dict, Optional, Sequence, Tuple, Union
import math

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, custom_op
from .types import PatchSet, PointCloud, SHAPE_KINDS

Seed = Union[int, np.random.Generator, None]


def _points(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(..., Na, 3) と (..., Nb, 3) の全組の二乗距離 (..., Na, Nb)"""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.sum(diff * diff, axis=-1)


def fps(cloud: Union[PointCloud, np.ndarray], n: int, seed: Seed = None,
        start: Optional[int] = None) -> np.ndarray:
    """最遠点サンプリング。最初の点は seed の乱数 (または start) で決める"""
    points = _points(cloud)
    p = points.shape[0]
    if not 1 <= n <= p:
        raise ContractError(f"fps needs 1 <= n <= p, got n={n}, p={p}")
    first = int(np.random.default_rng(seed).integers(p)) if start is None else int(start)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    diff = points - points[first]
    min_dist = np.sum(diff * diff, axis=1)
    for i in range(1, n):
        # argmax は同値なら最小のインデックスを返す
        nxt = int(np.argmax(min_dist))
        chosen[i] = nxt
        diff = points - points[nxt]
        min_dist = np.minimum(min_dist, np.sum(diff * diff, axis=1))
    return chosen


def knn_group(cloud: Union[PointCloud, np.ndarray], center_indices: np.ndarray, k: int) -> PatchSet:
    """各中心の k 近傍 (中心自身を含む) を集め、中心を引いて正規化する"""
    points = _points(cloud)
    p = points.shape[0]
    if not 1 <= k <= p:
        raise ContractError(f"knn_group needs 1 <= k <= p, got k={k}, p={p}")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    centers = points[center_indices]
    dist = pairwise_sq_dist(centers, points)
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k]
    patches = points[neighbors] - centers[:, None, :]
    return PatchSet(centers=centers, patches=patches, center_indices=center_indices,
                    neighbor_indices=neighbors)


def patchify(cloud: Union[PointCloud, np.ndarray], n: int, k: int, seed: Seed = None) -> PatchSet:
    return knn_group(cloud, fps(cloud, n, seed), k)


def fps_sample(cloud: PointCloud, num_points: int, seed: Seed = None) -> PointCloud:
    """モデルの点数に合わせて FPS で間引く。点が足りない場合は重複で補う"""
    p = len(cloud)
    if p == num_points:
        return cloud
    rng = np.random.default_rng(seed)
    if p < num_points:
        extra = rng.choice(p, size=num_points - p, replace=True)
        idx = np.concatenate([np.arange(p), extra])
    else:
        idx = fps(cloud, num_points, rng)
    return PointCloud(cloud.points[idx], label=cloud.label)


# Chamfer 距離

def chamfer_l2(a: np.ndarray, b: np.ndarray) -> float:
    """二乗距離による対称 Chamfer 距離"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("chamfer_l2 needs two non-empty point sets")
    dist = pairwise_sq_dist(a.reshape(-1, 3), b.reshape(-1, 3))
    return float(dist.min(axis=1).mean() + dist.min(axis=0).mean())


def chamfer_l2_loss(pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray]) -> Tensor:
    """B×Na×3 と B×Nb×3 のパッチごとの Chamfer 距離をバッチ平均した微分可能な損失"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.ndim != 3 or target.ndim != 3 or pred.shape[0] != target.shape[0] \
            or pred.shape[-1] != 3 or target.shape[-1] != 3:
        raise ShapeError("chamfer_l2_loss: expected matching B×N×3 sets", pred.shape, target.shape)
    batch, na, nb = pred.shape[0], pred.shape[1], target.shape[1]
    if batch == 0:
        return custom_op(np.zeros(()), (pred, target), "chamfer", lambda g: (None, None))
    if na == 0 or nb == 0:
        raise ContractError("chamfer_l2_loss needs non-empty point sets")
    a, b = pred.data, target.data
    dist = pairwise_sq_dist(a, b)
    nn_ab = np.argmin(dist, axis=2)   # B×Na
    nn_ba = np.argmin(dist, axis=1)   # B×Nb
    rows = np.arange(batch)[:, None]
    per_item = np.take_along_axis(dist, nn_ab[..., None], axis=2)[..., 0].mean(axis=1) \
        + np.take_along_axis(dist, nn_ba[:, None, :], axis=1)[:, 0, :].mean(axis=1)

    def grad_fn(g):
        scale = g / batch
        diff_ab = a - b[rows, nn_ab]          # a_i - 最近傍 b
        diff_ba = b - a[rows, nn_ba]          # b_j - 最近傍 a
        grad_a = 2.0 * scale * diff_ab / na
        grad_b = 2.0 * scale * diff_ba / nb
        np.add.at(grad_a, (rows, nn_ba), -2.0 * scale * diff_ba / nb)
        np.add.at(grad_b, (rows, nn_ab), -2.0 * scale * diff_ab / na)
        return grad_a, grad_b

    return custom_op(per_item.mean(), (pred, target), "chamfer", grad_fn)


# データ拡張

def scale_translate(cloud: PointCloud, scale: Sequence[float], shift: Sequence[float]) -> PointCloud:
    return PointCloud(cloud.points * np.asarray(scale) + np.asarray(shift), label=cloud.label)


def rotate_y(cloud: PointCloud, angle: float) -> PointCloud:
    """鉛直 (y) 軸まわりの回転"""
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return PointCloud(cloud.points @ rotation, label=cloud.label)


def flip_x(cloud: PointCloud) -> PointCloud:
    points = cloud.points.copy()
    points[:, 0] = -points[:, 0]
    return PointCloud(points, label=cloud.label)


def augment_scale_translate(cloud: PointCloud, seed: Seed = None,
                            scale_range: Tuple[float, float] = (2.0 / 3.0, 3.0 / 2.0),
                            shift_range: Tuple[float, float] = (-0.2, 0.2)) -> PointCloud:
    rng = np.random.default_rng(seed)
    scale = rng.uniform(scale_range[0], scale_range[1], size=3)
    shift = rng.uniform(shift_range[0], shift_range[1], size=3)
    return scale_translate(cloud, scale, shift)


def augment_rotate(cloud: PointCloud, seed: Seed = None) -> PointCloud:
    return rotate_y(cloud, float(np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi)))


def augment_jitter(cloud: PointCloud, sigma: float = 0.01, clip: float = 0.05, seed: Seed = None) -> PointCloud:
    noise = np.clip(sigma * np.random.default_rng(seed).standard_normal(cloud.points.shape), -clip, clip)
    return PointCloud(cloud.points + noise, label=cloud.label)


def augment_flip(cloud: PointCloud, seed: Seed = None) -> PointCloud:
    """確率 0.5 で x 軸を反転する"""
    return flip_x(cloud) if np.random.default_rng(seed).random() < 0.5 else cloud


AUGMENTATIONS: Dict[str, Callable[..., PointCloud]] = {
    "scale_translate": augment_scale_translate,
    "rotate": augment_rotate,
    "jitter": augment_jitter,
    "flip": augment_flip,
}


def apply_augmentations(cloud: PointCloud, names: Sequence[str], seed: Seed = None) -> PointCloud:
    """names の順に拡張を適用する"""
    rng = np.random.default_rng(seed)
    for name in names:
        if name not in AUGMENTATIONS:
            raise ContractError(f"Unknown augmentation: {name}")
        cloud = AUGMENTATIONS[name](cloud, seed=rng)
    return cloud


# 合成形状

def _sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng: np.random.Generator, n: int) -> np.ndarray:
    faces = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = faces // 2
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    points = np.zeros((n, 3))
    rows = np.arange(n)
    points[rows, axis] = np.where(faces % 2 == 0, 1.0, -1.0)
    points[rows, others[:, 0]] = uv[:, 0]
    points[rows, others[:, 1]] = uv[:, 1]
    return points


def _disk(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return r * np.cos(theta), r * np.sin(theta)


def _cylinder(rng: np.random.Generator, n: int) -> np.ndarray:
    # 側面 4π : 上下面 2π
    lateral = rng.uniform(size=n) < 2.0 / 3.0
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    y = rng.uniform(-1.0, 1.0, size=n)
    dx, dz = _disk(rng, n)
    cap_y = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    return np.stack([np.where(lateral, np.cos(theta), dx),
                     np.where(lateral, y, cap_y),
                     np.where(lateral, np.sin(theta), dz)], axis=1)


def _cone(rng: np.random.Generator, n: int) -> np.ndarray:
    slant = math.sqrt(5.0)
    lateral = rng.uniform(size=n) < slant / (1.0 + slant)
    t = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    dx, dz = _disk(rng, n)
    return np.stack([np.where(lateral, t * np.cos(theta), dx),
                     np.where(lateral, 1.0 - 2.0 * t, -1.0),
                     np.where(lateral, t * np.sin(theta), dz)], axis=1)


def _torus(rng: np.random.Generator, n: int, major: float = 0.7, minor: float = 0.3) -> np.ndarray:
    tube = np.empty(0)
    while tube.size < n:
        # 面積要素 (R + r cos θ) に比例させる棄却サンプリング
        cand = rng.uniform(0.0, 2.0 * math.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(cand)) / (major + minor)
        tube = np.concatenate([tube, cand[keep]])
    tube = tube[:n]
    phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ring = major + minor * np.cos(tube)
    return np.stack([ring * np.cos(phi), minor * np.sin(tube), ring * np.sin(phi)], axis=1)


def _plane(rng: np.random.Generator, n: int) -> np.ndarray:
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.stack([uv[:, 0], np.zeros(n), uv[:, 1]], axis=1)


def _helix(rng: np.random.Generator, n: int, turns: float = 3.0, radius: float = 0.8) -> np.ndarray:
    t = rng.uniform(0.0, 1.0, size=n)
    angle = 2.0 * math.pi * turns * t
    return np.stack([radius * np.cos(angle), 2.0 * t - 1.0, radius * np.sin(angle)], axis=1)


def _cross(rng: np.random.Generator, n: int, half_width: float = 0.05) -> np.ndarray:
    axis = rng.integers(3, size=n)
    points = rng.uniform(-half_width, half_width, size=(n, 3))
    points[np.arange(n), axis] = rng.uniform(-1.0, 1.0, size=n)
    return points


_GENERATORS: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "plane": _plane,
    "helix": _helix,
    "cross": _cross,
}


def gen_synthetic_shape(kind: str, n_points: int, noise: float = 0.0, seed: Seed = None) -> PointCloud:
    """[-1,1]^3 に収まる基本形状の表面から一様に点を取る"""
    if kind not in _GENERATORS:
        raise ContractError(f"Unknown shape kind: {kind}")
    if n_points < 8:
        raise ContractError(f"gen_synthetic_shape needs n_points >= 8, got {n_points}")
    rng = np.random.default_rng(seed)
    points = _GENERATORS[kind](rng, n_points)
    if noise > 0:
        points = points + rng.normal(0.0, noise, size=points.shape)
    return PointCloud(points, label=SHAPE_KINDS.index(kind))
