from typing import Any, Dict, List, Optional
from dataclasses import dataclass, field, fields, asdict, replace
import os
import json

from .core.errors import ConfigError
from .core.types import AttentionScale, MaskType, PcLoss, TargetMode
from .core.geometry import AUGMENTATIONS

SEED_ENV = "PCPMAE_SEED"


@dataclass
class ModelConfig:
    dim: int = 384
    encoder_depth: int = 12
    decoder_depth: int = 4
    heads: int = 6
    group_size: int = 32
    num_groups: int = 64
    num_points: int = 1024
    projector_depth: int = 0
    mlp_ratio: int = 4
    attention_scale: str = AttentionScale.HEAD_DIM.value
    decoder_pos_every_block: bool = False
    pointnet_hidden: int = 128
    classifier_hidden: int = 256

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(dim=96, encoder_depth=4, decoder_depth=2, heads=4,
                   group_size=16, num_groups=16, num_points=256)

    def validate(self) -> None:
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.dim % 6 != 0:
            raise ConfigError(f"dim {self.dim} must be divisible by 6 for the sin-cos embedding")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("encoder_depth and decoder_depth must be >= 1")
        if not 0 <= self.projector_depth <= 4:
            raise ConfigError(f"projector_depth must be within 0..4, got {self.projector_depth}")
        if self.group_size < 1 or self.num_groups < 1:
            raise ConfigError("group_size and num_groups must be positive")
        if self.num_groups > self.num_points or self.group_size > self.num_points:
            raise ConfigError(
                f"num_groups ({self.num_groups}) and group_size ({self.group_size}) "
                f"cannot exceed num_points ({self.num_points})")
        _check_choice("attention_scale", self.attention_scale, AttentionScale)


@dataclass
class TrainConfig:
    mask_ratio: float = 0.6
    eta: float = 0.1
    epochs: int = 300
    batch_size: int = 128
    lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    seed: int = 0
    augmentations: List[str] = field(default_factory=lambda: ["scale_translate", "rotate"])
    target_mode: str = TargetMode.PEM.value
    pc_loss: str = PcLoss.L2.value
    stop_gradient: bool = True
    detach_target: bool = True
    share_pcm_weights: bool = True
    mask_type: str = MaskType.RAND.value
    grad_clip: float = 10.0
    save_every: int = 50
    prefetch: int = 2
    workers: int = 1
    dataset_size: int = 200
    source_points: int = 2048
    shape_noise: float = 0.0
    finetune_epochs: int = 60
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 32
    finetune_test_fraction: float = 0.25
    freeze_encoder: bool = False

    @classmethod
    def full(cls) -> "TrainConfig":
        return cls()

    @classmethod
    def desk(cls) -> "TrainConfig":
        return cls(epochs=200, batch_size=16, source_points=512, save_every=50,
                   finetune_epochs=30)

    def validate(self) -> None:
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be within [0, 1], got {self.mask_ratio}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        for name in ("lr", "min_lr", "epochs", "batch_size", "finetune_lr",
                     "finetune_epochs", "finetune_batch_size", "dataset_size", "source_points"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay/warmup_epochs must be >= 0 and grad_clip > 0")
        if self.prefetch < 1 or self.workers < 1 or self.save_every < 1:
            raise ConfigError("prefetch, workers and save_every must be >= 1")
        if not 0.0 < self.finetune_test_fraction < 1.0:
            raise ConfigError("finetune_test_fraction must be within (0, 1)")
        _check_choice("target_mode", self.target_mode, TargetMode)
        _check_choice("pc_loss", self.pc_loss, PcLoss)
        _check_choice("mask_type", self.mask_type, MaskType)
        unknown = [a for a in self.augmentations if a not in AUGMENTATIONS]
        if unknown:
            raise ConfigError(f"Unknown augmentations: {unknown}")


def _check_choice(name: str, value: str, enum_type) -> None:
    allowed = [e.value for e in enum_type]
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
PRESETS = {"desk": (ModelConfig.desk, TrainConfig.desk), "full": (ModelConfig.full, TrainConfig.full)}


class Config:
    """フラットな JSON 設定を読み、CLI の上書きと環境変数を重ねる"""

    def __init__(self, config_path: Optional[str] = None, preset: str = "desk",
                 overrides: Optional[Dict[str, Any]] = None):
        self.config_path = config_path
        self.raw = self._load_config()
        preset = self.raw.pop("preset", preset)
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        self.preset = preset
        model_factory, train_factory = PRESETS[preset]
        self.model = model_factory()
        self.train = train_factory()
        self.apply(self.raw)
        if overrides:
            self.apply({k: v for k, v in overrides.items() if v is not None})
        seed = os.getenv(SEED_ENV)
        if seed:
            try:
                self.train = replace(self.train, seed=int(seed))
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        self.model.validate()
        self.train.validate()

    def _load_config(self) -> Dict:
        if not self.config_path:
            return {}
        if not os.path.exists(self.config_path):
            raise ConfigError(f"Config file not found: {self.config_path}")
        with open(self.config_path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Invalid JSON in {self.config_path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"Config file must hold a flat JSON object: {self.config_path}")
        return data

    def apply(self, values: Dict[str, Any]) -> None:
        """フィールド名と一致するキーを ModelConfig / TrainConfig に振り分ける"""
        unknown = [k for k in values if k not in MODEL_FIELDS and k not in TRAIN_FIELDS]
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        model_values = {k: v for k, v in values.items() if k in MODEL_FIELDS}
        train_values = {k: v for k, v in values.items() if k in TRAIN_FIELDS}
        self.model = replace(self.model, **model_values)
        self.train = replace(self.train, **train_values)

    def snapshot(self) -> Dict[str, Any]:
        return {"preset": self.preset, **asdict(self.model), **asdict(self.train)}

    @staticmethod
    def from_snapshot(snapshot: Dict[str, Any]) -> "Config":
        config = Config.__new__(Config)
        config.config_path = None
        config.raw = dict(snapshot)
        config.preset = snapshot.get("preset", "desk")
        config.model = ModelConfig(**{k: v for k, v in snapshot.items() if k in MODEL_FIELDS})
        config.train = TrainConfig(**{k: v for k, v in snapshot.items() if k in TRAIN_FIELDS})
        return config

    def get_runs_dir(self) -> str:
        return os.getenv("PCPMAE_RUNS_DIR", "runs")

    def get_log_level(self) -> str:
        return os.getenv("LOG_LEVEL", "INFO")
