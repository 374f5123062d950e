from enum import Enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


class TargetMode(Enum):
    PEM = "pem"
    SINCOS = "sincos"
    COORDS = "coords"


class PcLoss(Enum):
    L2 = "l2"
    L1 = "l1"
    SMOOTH_L1 = "smooth_l1"
    COSINE = "cosine"


class MaskType(Enum):
    RAND = "rand"
    BLOCK = "block"


class AttentionScale(Enum):
    HEAD_DIM = "head_dim"
    FULL_DIM = "full_dim"


SHAPE_KINDS = ["sphere", "cube", "cylinder", "cone", "torus", "plane", "helix", "cross"]


@dataclass
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"PointCloud needs a p×3 array with p ≥ 1, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("PointCloud coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchSet:
    centers: np.ndarray          # n×3
    patches: np.ndarray          # n×k×3 (中心で正規化済み)
    center_indices: np.ndarray   # n
    neighbor_indices: Optional[np.ndarray] = None  # n×k


@dataclass
class MaskSplit:
    masked_indices: np.ndarray
    visible_indices: np.ndarray
    ratio: float


@dataclass
class PatchBatch:
    """前処理済みのミニバッチ (B 個の PatchSet を積んだもの)"""
    centers: np.ndarray          # B×n×3
    patches: np.ndarray          # B×n×k×3
    labels: Optional[np.ndarray] = None
    points: List[np.ndarray] = field(default_factory=list)
