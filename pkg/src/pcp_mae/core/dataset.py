"""合成形状のデータセットと、次バッチを並行して用意するプリフェッチャ"""
from typing import Callable, Generic, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar
import logging
import queue
import threading

import numpy as np

from .errors import ContractError
from .geometry import gen_synthetic_shape
from .types import PointCloud, SHAPE_KINDS

logger = logging.getLogger("pcp_mae.dataset")

T = TypeVar("T")
R = TypeVar("R")


class CloudDataset:
    def __init__(self, clouds: Sequence[PointCloud]):
        self.clouds = list(clouds)

    def __len__(self) -> int:
        return len(self.clouds)

    def __getitem__(self, index: int) -> PointCloud:
        return self.clouds[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if c.label is None else c.label for c in self.clouds], dtype=np.int64)

    def split(self, test_fraction: float, seed: int = 0) -> Tuple["CloudDataset", "CloudDataset"]:
        """ラベルごとに test_fraction を取り分ける層化分割"""
        if not 0.0 < test_fraction < 1.0:
            raise ContractError(f"test_fraction must be within (0, 1), got {test_fraction}")
        rng = np.random.default_rng(seed)
        labels = self.labels
        train_idx: List[int] = []
        test_idx: List[int] = []
        for label in np.unique(labels):
            members = np.flatnonzero(labels == label)
            members = members[rng.permutation(len(members))]
            n_test = int(round(test_fraction * len(members)))
            if len(members) > 1:
                n_test = min(max(n_test, 1), len(members) - 1)
            else:
                n_test = 0
            test_idx.extend(members[:n_test].tolist())
            train_idx.extend(members[n_test:].tolist())
        return (CloudDataset([self.clouds[i] for i in sorted(train_idx)]),
                CloudDataset([self.clouds[i] for i in sorted(test_idx)]))


class SyntheticShapeDataset(CloudDataset):
    """i 番目の要素は kinds[i % len(kinds)] の形状。各要素の乱数は (seed, i) から決まる"""

    def __init__(self, size: int, kinds: Optional[Sequence[str]] = None, source_points: int = 2048,
                 noise: float = 0.0, seed: int = 0):
        if size < 1:
            raise ContractError(f"dataset size must be positive, got {size}")
        self.kinds = list(kinds) if kinds else list(SHAPE_KINDS)
        self.seed = seed
        clouds = [
            gen_synthetic_shape(self.kinds[i % len(self.kinds)], source_points, noise,
                                seed=np.random.default_rng([seed, i]))
            for i in range(size)
        ]
        super().__init__(clouds)
        logger.debug(f"Generated {size} synthetic shapes ({len(self.kinds)} kinds, {source_points} points)")


_DONE = object()


class _Failure:
    def __init__(self, error: Exception):
        self.error = error


class BatchPrefetcher(Generic[T, R]):
    """プロデューサスレッドが prepare(item) を先回りで計算し、元の順序で返す

    キューは depth 件で頭打ちになる。プロデューサ側の例外は消費側で送出し直す。
    """

    def __init__(self, items: Iterable[T], prepare: Callable[[T], R], depth: int = 2):
        if depth < 1:
            raise ContractError(f"prefetch depth must be >= 1, got {depth}")
        self._items = items
        self._prepare = prepare
        self._queue: "queue.Queue" = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _produce(self) -> None:
        try:
            for item in self._items:
                if self._stop.is_set():
                    return
                self._put(self._prepare(item))
        except Exception as e:
            self._put(_Failure(e))
            return
        self._put(_DONE)

    def _put(self, value) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(value, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[R]:
        self._thread = threading.Thread(target=self._produce, name="pcp-mae-prefetch", daemon=True)
        self._thread.start()
        try:
            while True:
                value = self._queue.get()
                if value is _DONE:
                    return
                if isinstance(value, _Failure):
                    raise value.error
                yield value
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
