"""合成形状の分類による事前学習の効果確認"""
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional
import logging
import math

import numpy as np

from ..config import Config
from .dataset import CloudDataset
from .embedding import mini_pointnet, pem, sincos_pe
from .errors import ContractError
from .layers import Linear
from .model import ModelWeights, encoder_forward
from .optim import OptimState, adamw_step, clip_grad_norm, cosine_lr, no_decay_names, warmup_steps_for
from .tensor import Tensor, backward, concat, cross_entropy, gelu, stop_gradient
from .training import prepare_batch
from .types import PatchBatch

logger = logging.getLogger("pcp_mae.finetune")


class ClassifierHead:
    """concat(平均プーリング, 最大プーリング) → 2 層 MLP"""

    def __init__(self, dim: int, hidden: int, num_classes: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.fc1 = Linear(2 * dim, hidden, "classifier.fc1", rng)
        self.fc2 = Linear(hidden, num_classes, "classifier.fc2", rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        pooled = concat([tokens.mean(axis=1), tokens.max(axis=1)], axis=-1)
        return self.fc2(gelu(self.fc1(pooled)))

    def parameters(self) -> List[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


@dataclass
class FinetuneResult:
    accuracy: float
    initial_accuracy: float
    num_classes: int
    losses: List[float] = field(default_factory=list)


def encode_tokens(batch: PatchBatch, weights: ModelWeights) -> Tensor:
    """マスクなしで全パッチをエンコーダに通す"""
    tokens = mini_pointnet(batch.patches, weights.embed)
    positions = pem(sincos_pe(batch.centers, weights.config.dim), weights.embed)
    return encoder_forward(tokens, positions, weights)


def _label_index(train_set: CloudDataset, test_set: CloudDataset) -> Dict[int, int]:
    classes = sorted(set(train_set.labels.tolist()))
    unseen = sorted(set(test_set.labels.tolist()) - set(classes))
    if unseen:
        raise ContractError(
            f"Class count mismatch: test set has labels {unseen} absent from the {len(classes)} training classes")
    return {label: i for i, label in enumerate(classes)}


def _accuracy(batches: List[PatchBatch], targets: List[np.ndarray], weights: ModelWeights,
              head: ClassifierHead) -> float:
    correct, total = 0, 0
    for batch, target in zip(batches, targets):
        logits = head(stop_gradient(encode_tokens(batch, weights)))
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == target))
        total += len(target)
    return correct / max(total, 1)


def finetune_classifier(weights: Optional[ModelWeights], train_set: CloudDataset, test_set: CloudDataset,
                        config: Config, seed: int = 0) -> FinetuneResult:
    """エンコーダ (事前学習済みまたは初期値) と分類ヘッドを学習し、テスト精度を返す

    weights は複製してから使うので呼び出し側の重みは変わらない。
    """
    train = config.train
    if len(train_set) == 0 or len(test_set) == 0:
        raise ContractError("finetune_classifier needs non-empty train and test sets")
    weights = weights.clone() if weights is not None else ModelWeights.initialize(
        config.model, seed=seed, share_pcm_weights=train.share_pcm_weights, target_mode=train.target_mode)
    label_index = _label_index(train_set, test_set)
    rng = np.random.default_rng([seed, 5])
    head = ClassifierHead(config.model.dim, config.model.classifier_hidden, len(label_index), rng)

    params: "OrderedDict[str, Tensor]" = OrderedDict((p.name, p) for p in head.parameters())
    if not train.freeze_encoder:
        for name, p in weights.named_parameters().items():
            if name.startswith(("embed.", "encoder.")):
                params[name] = p
    optim = OptimState.for_params(params)
    no_decay = no_decay_names(params)

    test_batches, test_targets = [], []
    size = train.finetune_batch_size
    for index, start in enumerate(range(0, len(test_set), size)):
        clouds = [test_set[i] for i in range(start, min(start + size, len(test_set)))]
        batch = prepare_batch(clouds, config, augmentations=[], seed=[seed, 6, index])
        test_batches.append(batch)
        test_targets.append(np.array([label_index[int(label)] for label in batch.labels]))
    initial = _accuracy(test_batches, test_targets, weights, head)

    steps_per_epoch = math.ceil(len(train_set) / size)
    total_steps = train.finetune_epochs * steps_per_epoch
    warmup = warmup_steps_for(train.warmup_epochs, train.finetune_epochs, steps_per_epoch)
    losses: List[float] = []
    step = 0
    for epoch in range(train.finetune_epochs):
        order = np.random.default_rng([seed, 7, epoch]).permutation(len(train_set))
        epoch_losses = []
        for index in range(steps_per_epoch):
            chosen = order[index * size:(index + 1) * size]
            batch = prepare_batch([train_set[int(i)] for i in chosen], config, seed=[seed, 8, epoch, index])
            target = np.array([label_index[int(label)] for label in batch.labels])
            tokens = encode_tokens(batch, weights)
            if train.freeze_encoder:
                tokens = stop_gradient(tokens)
            loss = cross_entropy(head(tokens), target)
            grads = backward(loss)
            clip_grad_norm(grads, train.grad_clip)
            lr = cosine_lr(step + 1, total_steps, warmup, train.finetune_lr, train.min_lr)
            adamw_step(params, grads, optim, lr, weight_decay=train.weight_decay, no_decay=no_decay)
            epoch_losses.append(loss.item())
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        logger.debug(f"finetune epoch {epoch + 1}: loss={losses[-1]:.6f}")

    accuracy = _accuracy(test_batches, test_targets, weights, head)
    logger.info(f"Fine-tuned seed {seed}: accuracy {accuracy:.4f} (initial {initial:.4f})")
    return FinetuneResult(accuracy=accuracy, initial_accuracy=initial, num_classes=len(label_index),
                          losses=losses)
