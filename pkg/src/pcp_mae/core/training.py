"""マスク分割、目的関数、事前学習ループ、中心リーク実験"""
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union
import logging
import math

import numpy as np

from ..config import Config
from .checkpoint import CheckpointState, check_compatible, save_checkpoint
from .dataset import BatchPrefetcher, CloudDataset, SyntheticShapeDataset
from .embedding import mini_pointnet, pem, sincos_pe, sincos_pe_tensor
from .errors import ContractError, NonFiniteLossError, ShapeError
from .geometry import apply_augmentations, chamfer_l2_loss, fps_sample, pairwise_sq_dist, patchify
from .layers import unique_parameters
from .model import ModelWeights, decoder_forward, joint_forward, reconstruction_head
from .optim import OptimState, adamw_step, clip_grad_norm, cosine_lr, no_decay_names, warmup_steps_for
from .run_utils import RunUtils
from .tensor import (Tensor, absolute, as_tensor, backward, custom_op, gather_rows, reshape,
                     smooth_l1, sqrt, stop_gradient)
from .types import MaskSplit, MaskType, PatchBatch, PcLoss, PointCloud, TargetMode

logger = logging.getLogger("pcp_mae.training")

Seed = Union[int, Sequence[int], np.random.Generator, None]

# m·n の丸め誤差で床関数が 1 つ下にずれないための許容幅
_FLOOR_TOLERANCE = 1e-9


def num_masked_for(n: int, ratio: float) -> int:
    return int(math.floor(ratio * n + _FLOOR_TOLERANCE))


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must be within [0, 1], got {ratio}")


def mask_split(n: int, ratio: float, seed: Seed = None) -> MaskSplit:
    """一様ランダムに floor(m·n) 個のパッチをマスクする"""
    _check_ratio(ratio)
    order = np.random.default_rng(seed).permutation(n)
    count = num_masked_for(n, ratio)
    return MaskSplit(masked_indices=np.sort(order[:count]), visible_indices=np.sort(order[count:]),
                     ratio=ratio)


def block_mask_split(centers: np.ndarray, ratio: float, seed: Seed = None) -> MaskSplit:
    """ランダムに選んだ中心に近い順に floor(m·n) 個のパッチをマスクする"""
    _check_ratio(ratio)
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    anchor = int(np.random.default_rng(seed).integers(n))
    dist = pairwise_sq_dist(centers[anchor:anchor + 1], centers)[0]
    order = np.argsort(dist, kind="stable")
    count = num_masked_for(n, ratio)
    return MaskSplit(masked_indices=np.sort(order[:count]), visible_indices=np.sort(order[count:]),
                     ratio=ratio)


def batch_mask_split(centers: np.ndarray, ratio: float, mask_type: str,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """バッチの各要素に独立な分割を作り (masked B×mn, visible B×(n-mn)) を返す"""
    splits: List[MaskSplit] = []
    for item_centers in centers:
        if mask_type == MaskType.BLOCK.value:
            splits.append(block_mask_split(item_centers, ratio, rng))
        else:
            splits.append(mask_split(item_centers.shape[0], ratio, rng))
    masked = np.stack([s.masked_indices for s in splits]).astype(np.int64)
    visible = np.stack([s.visible_indices for s in splits]).astype(np.int64)
    return masked, visible


# 損失

def loss_pc(pred: Tensor, target, mode: str = PcLoss.L2.value, detach_target: bool = True) -> Tensor:
    """予測した位置埋め込みと目標との距離 (全要素平均)"""
    pred, target = as_tensor(pred), as_tensor(target)
    if detach_target:
        target = stop_gradient(target)
    if pred.shape != target.shape:
        raise ShapeError("loss_pc: prediction and target disagree", pred.shape, target.shape)
    if pred.size == 0:
        return custom_op(np.zeros(()), (pred,), "loss_pc", lambda g: (np.zeros_like(pred.data),))
    diff = pred - target
    if mode == PcLoss.L2.value:
        return (diff * diff).mean()
    if mode == PcLoss.L1.value:
        return absolute(diff).mean()
    if mode == PcLoss.SMOOTH_L1.value:
        return smooth_l1(diff).mean()
    if mode == PcLoss.COSINE.value:
        dot = (pred * target).sum(axis=-1)
        norms = sqrt((pred * pred).sum(axis=-1) * (target * target).sum(axis=-1) + 1e-12)
        return (1.0 - dot / norms).mean()
    raise ContractError(f"Unknown pc_loss mode: {mode}")


def loss_recon(pred_patches, gt_patches) -> Tensor:
    """マスクパッチごとの Chamfer 距離をパッチとバッチで平均する"""
    pred, gt = as_tensor(pred_patches), as_tensor(gt_patches)
    if pred.shape != gt.shape or pred.ndim < 3 or pred.shape[-1] != 3:
        raise ShapeError("loss_recon: expected matching (...)×k×3 patches", pred.shape, gt.shape)
    lead = int(np.prod(pred.shape[:-2]))
    k = pred.shape[-2]
    return chamfer_l2_loss(reshape(pred, (lead, k, 3)), reshape(gt, (lead, k, 3)))


def total_loss(pc: Tensor, recon: Tensor, eta: float) -> Tensor:
    if eta < 0:
        raise ContractError(f"eta must be >= 0, got {eta}")
    return pc * eta + recon


# バッチの前処理

def prepare_batch(clouds: Sequence[PointCloud], config: Config,
                  augmentations: Optional[Sequence[str]] = None, seed: Seed = None,
                  item_seeds: Optional[Sequence[Seed]] = None) -> PatchBatch:
    """拡張 → 点数の揃え込み → FPS+KNN によるパッチ化

    item_seeds を渡すと各クラウドの乱数はバッチの構成によらずその seed だけで決まる。
    """
    model = config.model
    augmentations = config.train.augmentations if augmentations is None else augmentations
    if item_seeds is not None and len(item_seeds) != len(clouds):
        raise ContractError(f"item_seeds has {len(item_seeds)} entries for {len(clouds)} clouds")
    shared = np.random.default_rng(seed)
    centers, patches, points, labels = [], [], [], []
    for i, cloud in enumerate(clouds):
        rng = shared if item_seeds is None else np.random.default_rng(item_seeds[i])
        cloud = apply_augmentations(cloud, augmentations, rng)
        cloud = fps_sample(cloud, model.num_points, rng)
        patch_set = patchify(cloud, model.num_groups, model.group_size, rng)
        centers.append(patch_set.centers)
        patches.append(patch_set.patches)
        points.append(cloud.points)
        labels.append(-1 if cloud.label is None else cloud.label)
    return PatchBatch(centers=np.stack(centers), patches=np.stack(patches),
                      labels=np.array(labels, dtype=np.int64), points=points)


# 順伝播

@dataclass
class PretrainOutput:
    loss: Tensor
    loss_pc: Tensor
    loss_recon: Tensor
    pred_patches: Tensor
    pe_pred: Tensor
    masked_indices: np.ndarray
    visible_indices: np.ndarray


def _gather_numpy(values: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return values[np.arange(values.shape[0])[:, None], indices]


def pretrain_forward(batch: PatchBatch, weights: ModelWeights, config: Config,
                     masked_indices: np.ndarray, visible_indices: np.ndarray) -> PretrainOutput:
    """埋め込み → エンコーダ/PCM → stop-gradient 付きデコーダ → ヘッド → 損失"""
    train = config.train
    dim = weights.config.dim
    tokens = mini_pointnet(batch.patches, weights.embed)
    pe_all = pem(sincos_pe(batch.centers, dim), weights.embed)
    e_visible = gather_rows(tokens, visible_indices)
    e_masked = gather_rows(tokens, masked_indices)
    pe_visible = gather_rows(pe_all, visible_indices)
    t_visible, pe_pred = joint_forward(e_visible, pe_visible, e_masked, weights)

    masked_centers = _gather_numpy(batch.centers, masked_indices)
    if train.target_mode == TargetMode.SINCOS.value:
        target = Tensor(sincos_pe(masked_centers, dim))
    elif train.target_mode == TargetMode.COORDS.value:
        target = Tensor(masked_centers)
    else:
        target = gather_rows(pe_all, masked_indices)
    pc = loss_pc(pe_pred, target, train.pc_loss, detach_target=train.detach_target)

    decoder_in = stop_gradient(pe_pred) if train.stop_gradient else pe_pred
    if train.target_mode == TargetMode.SINCOS.value:
        pe_masked = pem(decoder_in, weights.embed)
    elif train.target_mode == TargetMode.COORDS.value:
        pe_masked = pem(sincos_pe_tensor(decoder_in, dim), weights.embed)
    else:
        pe_masked = decoder_in
    hidden = decoder_forward(t_visible, pe_visible, pe_masked, weights.mask_token, weights)
    pred_patches = reconstruction_head(hidden, weights.head)
    recon = loss_recon(pred_patches, _gather_numpy(batch.patches, masked_indices))
    return PretrainOutput(loss=total_loss(pc, recon, train.eta), loss_pc=pc, loss_recon=recon,
                          pred_patches=pred_patches, pe_pred=pe_pred,
                          masked_indices=masked_indices, visible_indices=visible_indices)


def leakage_forward(batch: PatchBatch, weights: ModelWeights) -> Tuple[Tensor, Tensor]:
    """エンコーダなし、全パッチをマスクし真の中心の位置埋め込みだけをデコーダに与える"""
    batch_size, n = batch.centers.shape[:2]
    dim = weights.config.dim
    pe_masked = pem(sincos_pe(batch.centers, dim), weights.embed)
    empty = Tensor(np.zeros((batch_size, 0, dim)))
    hidden = decoder_forward(empty, empty, pe_masked, weights.mask_token, weights)
    pred_patches = reconstruction_head(hidden, weights.head)
    return pred_patches, loss_recon(pred_patches, batch.patches)


def center_only_baseline(batch: PatchBatch) -> float:
    """全点をパッチ中心 (正規化座標の原点) に置いたときの Chamfer 距離"""
    return loss_recon(np.zeros_like(batch.patches), batch.patches).item()


# 1 ステップ

def decay_exempt(params: Mapping[str, Tensor], weights: ModelWeights) -> Set[str]:
    """バイアス、LayerNorm とマスクトークンは weight decay をかけない"""
    return no_decay_names(params, extra=(weights.mask_token.name,))


def _check_finite(step: int, losses: Dict[str, float], weights: ModelWeights,
                  dump_dir: Optional[Path], extra: Optional[Dict] = None) -> None:
    if all(math.isfinite(v) for v in losses.values()):
        return
    dump_path = None
    if dump_dir is not None:
        dump = {
            "step": step,
            "losses": {k: repr(v) for k, v in losses.items()},
            "param_norms": {name: float(np.linalg.norm(p.data)) for name, p in
                            weights.named_parameters().items()},
            **(extra or {}),
        }
        dump_path = RunUtils().dump_json(dump, Path(dump_dir) / f"nonfinite_step_{step}.json")
    logger.error(f"Non-finite loss at step {step}: {losses}")
    raise NonFiniteLossError(step, losses, dump_path)


def pretrain_step(batch: PatchBatch, weights: ModelWeights, optim: OptimState, config: Config,
                  lr: float, rng: np.random.Generator, step: int = 0,
                  dump_dir: Optional[Path] = None) -> Dict[str, float]:
    """1 回の更新。損失の内訳と学習率などを返す"""
    train = config.train
    masked, visible = batch_mask_split(batch.centers, train.mask_ratio, train.mask_type, rng)
    out = pretrain_forward(batch, weights, config, masked, visible)
    losses = {"loss": out.loss.item(), "loss_pc": out.loss_pc.item(), "loss_recon": out.loss_recon.item()}
    _check_finite(step, losses, weights, dump_dir,
                  {"masked_indices": masked.tolist(), "visible_indices": visible.tolist()})
    grads = backward(out.loss)
    grad_norm = clip_grad_norm(grads, train.grad_clip)
    params = weights.named_parameters()
    adamw_step(params, grads, optim, lr, weight_decay=train.weight_decay,
               no_decay=decay_exempt(params, weights))
    logger.debug(f"step {step}: loss={losses['loss']:.6f} pc={losses['loss_pc']:.6f} "
                 f"recon={losses['loss_recon']:.6f} lr={lr:.3e} grad_norm={grad_norm:.3f}")
    return {**losses, "lr": lr, "grad_norm": grad_norm,
            "num_masked": int(masked.shape[1]), "num_visible": int(visible.shape[1])}


def leakage_parameters(weights: ModelWeights) -> "OrderedDict[str, Tensor]":
    return OrderedDict((p.name, p) for p in unique_parameters(weights.decoder_parameters()))


def leakage_step(batch: PatchBatch, weights: ModelWeights, optim: OptimState, config: Config,
                 lr: float, step: int = 0, dump_dir: Optional[Path] = None) -> Dict[str, float]:
    """m = 1 でデコーダだけを学習する 1 ステップ"""
    _, loss = leakage_forward(batch, weights)
    value = loss.item()
    losses = {"loss": value, "loss_pc": 0.0, "loss_recon": value}
    _check_finite(step, losses, weights, dump_dir)
    grads = backward(loss)
    grad_norm = clip_grad_norm(grads, config.train.grad_clip)
    params = leakage_parameters(weights)
    adamw_step(params, grads, optim, lr, weight_decay=config.train.weight_decay,
               no_decay=decay_exempt(params, weights))
    return {**losses, "lr": lr, "grad_norm": grad_norm,
            "num_masked": int(batch.centers.shape[1]), "num_visible": 0}


# 学習ループ

ROW_KEYS = ("loss", "loss_pc", "loss_recon", "grad_norm")


class Pretrainer:
    """ステップ番号だけからバッチが決まる学習ループ (途中再開してもビット一致する)

    バッチの中身は (seed, epoch, batch index) から、マスクは保存される乱数生成器から作る。
    leakage=True ではエンコーダを使わず m = 1 でデコーダだけを学習する。
    """

    def __init__(self, config: Config, dataset: Optional[CloudDataset] = None,
                 weights: Optional[ModelWeights] = None, leakage: bool = False,
                 checkpoint_dir: Optional[Union[str, Path]] = None):
        self.config = config
        train = config.train
        self.leakage = leakage
        self.dataset = dataset if dataset is not None else SyntheticShapeDataset(
            train.dataset_size, None, train.source_points, train.shape_noise, train.seed)
        self.weights = weights if weights is not None else ModelWeights.initialize(
            config.model, seed=train.seed, share_pcm_weights=train.share_pcm_weights,
            target_mode=train.target_mode)
        self.optim = OptimState.for_params(self.trainable_parameters())
        self.rng = np.random.default_rng([train.seed, 1])
        self.step = 0
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.steps_per_epoch = math.ceil(len(self.dataset) / train.batch_size)
        self.total_steps = train.epochs * self.steps_per_epoch
        self.warmup_steps = warmup_steps_for(train.warmup_epochs, train.epochs, self.steps_per_epoch)

    def trainable_parameters(self) -> "OrderedDict[str, Tensor]":
        return leakage_parameters(self.weights) if self.leakage else self.weights.named_parameters()

    def lr_at(self, step: int) -> float:
        train = self.config.train
        return cosine_lr(step + 1, self.total_steps, self.warmup_steps, train.lr, train.min_lr)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.train.seed, 2, epoch]).permutation(len(self.dataset))

    def batch_for_step(self, step: int) -> PatchBatch:
        epoch, index = divmod(step, self.steps_per_epoch)
        size = self.config.train.batch_size
        chosen = self._epoch_order(epoch)[index * size:(index + 1) * size]
        if self.leakage:
            return self.leakage_batch(chosen)
        return prepare_batch([self.dataset[int(i)] for i in chosen], self.config,
                             seed=[self.config.train.seed, 3, epoch, index])

    def leakage_batch(self, indices: Sequence[int]) -> PatchBatch:
        """リーク実験のバッチ。拡張なし、各形状の点とパッチは形状ごとの seed で固定"""
        seed = self.config.train.seed
        return prepare_batch([self.dataset[int(i)] for i in indices], self.config, augmentations=[],
                             item_seeds=[[seed, 4, int(i)] for i in indices])

    def train_step(self, batch: PatchBatch) -> Dict[str, float]:
        lr = self.lr_at(self.step)
        if self.leakage:
            result = leakage_step(batch, self.weights, self.optim, self.config, lr, self.step,
                                  self.checkpoint_dir)
        else:
            result = pretrain_step(batch, self.weights, self.optim, self.config, lr, self.rng,
                                   self.step, self.checkpoint_dir)
        self.step += 1
        return result

    def run(self, until_step: Optional[int] = None,
            on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> List[Dict[str, float]]:
        """until_step (既定は最後) まで進め、完了したエポックごとの平均を返す"""
        end = self.total_steps if until_step is None else min(until_step, self.total_steps)
        rows: List[Dict[str, float]] = []
        results: List[Dict[str, float]] = []
        prefetcher = BatchPrefetcher(range(self.step, end), self.batch_for_step, self.config.train.prefetch)
        for batch in prefetcher:
            results.append(self.train_step(batch))
            if self.step % self.steps_per_epoch == 0:
                row = self._epoch_row(self.step // self.steps_per_epoch, results)
                results = []
                rows.append(row)
                logger.info(f"epoch {row['epoch']}: loss={row['loss']:.6f} pc={row['loss_pc']:.6f} "
                            f"recon={row['loss_recon']:.6f} lr={row['lr']:.3e}")
                self._maybe_checkpoint(row["epoch"])
                if on_epoch is not None:
                    on_epoch(row)
        return rows

    @staticmethod
    def _epoch_row(epoch: int, results: List[Dict[str, float]]) -> Dict[str, float]:
        row: Dict[str, float] = {"epoch": epoch}
        for key in ROW_KEYS:
            row[key] = float(np.mean([r[key] for r in results]))
        row["lr"] = results[-1]["lr"]
        row["num_masked"] = results[-1]["num_masked"]
        row["num_visible"] = results[-1]["num_visible"]
        return row

    def _maybe_checkpoint(self, epoch: int) -> None:
        if self.checkpoint_dir is None or self.leakage:
            return
        if epoch % self.config.train.save_every == 0 or self.step == self.total_steps:
            self.save(self.checkpoint_dir / f"epoch_{epoch:04d}.ckpt")

    # チェックポイント

    def state(self) -> CheckpointState:
        return CheckpointState(params=self.weights.arrays(), optim=self.optim,
                               rng_state=self.rng.bit_generator.state,
                               config=self.config.snapshot(), step=self.step)

    def save(self, path: Union[str, Path]) -> str:
        return save_checkpoint(self.state(), path)

    def restore(self, state: CheckpointState) -> None:
        """保存時点のパラメータ、モーメント、乱数状態、ステップへ戻す"""
        check_compatible(state.config, self.config.model, self.config.train)
        self.weights.load_arrays(state.params)
        names = set(self.trainable_parameters())
        if set(state.optim.exp_avg) != names or set(state.optim.exp_avg_sq) != names:
            raise ContractError("Optimizer state does not match the trainable parameters")
        self.optim = state.optim
        self.rng.bit_generator.state = state.rng_state
        self.step = state.step

    # 評価

    def evaluate_leakage(self) -> Tuple[float, float]:
        """拡張なしで全データを通し (再構成 Chamfer, 中心のみのベースライン) の平均を返す"""
        size = self.config.train.batch_size
        recon_total, baseline_total = 0.0, 0.0
        for start in range(0, len(self.dataset), size):
            indices = range(start, min(start + size, len(self.dataset)))
            batch = self.leakage_batch(indices)
            _, loss = leakage_forward(batch, self.weights)
            recon_total += loss.item() * len(indices)
            baseline_total += center_only_baseline(batch) * len(indices)
        return recon_total / len(self.dataset), baseline_total / len(self.dataset)
