"""バージョン付きのバイナリ・チェックポイント (リトルエンディアン)

レイアウト:
    "PCPM" | u32 version | u64 tensor count | tensors...
    optimizer: u64 step | u64 tensor count | tensors (exp_avg/<name>, exp_avg_sq/<name>)
    rng: u32 length | JSON
    config: u32 length | JSON (キーはソート済み)
    u64 training step
tensor: u16 name length | name | u8 rank | u64 dims... | f32 data
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Union
import json
import logging
import os
import struct

import numpy as np

from .errors import CheckpointFormatError, ConfigMismatchError
from .optim import OptimState

logger = logging.getLogger("pcp_mae.checkpoint")

MAGIC = b"PCPM"
VERSION = 1
EXP_AVG = "exp_avg/"
EXP_AVG_SQ = "exp_avg_sq/"

# 読み込み側の構成と一致しなければならない ModelConfig のフィールド
ARCHITECTURE_FIELDS = ("dim", "encoder_depth", "decoder_depth", "heads", "group_size", "num_groups",
                       "projector_depth", "mlp_ratio", "pointnet_hidden")
# パラメータの集合を変える TrainConfig のフィールド
PARAMETER_LAYOUT_FIELDS = ("share_pcm_weights", "target_mode")
# パラメータは変えずに順伝播だけを変える ModelConfig のフィールド
FORWARD_FIELDS = ("attention_scale", "decoder_pos_every_block")


@dataclass
class CheckpointState:
    params: "OrderedDict[str, np.ndarray]"
    optim: OptimState = field(default_factory=OptimState)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    step: int = 0


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f4")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", array.ndim)]
    parts += [struct.pack("<Q", dim) for dim in array.shape]
    parts.append(array.tobytes())
    return b"".join(parts)


def _pack_json(data: Mapping[str, Any]) -> bytes:
    encoded = json.dumps(data, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


def serialize_checkpoint(state: CheckpointState) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(state.params))]
    parts += [_pack_tensor(name, array) for name, array in state.params.items()]
    moments = [(EXP_AVG + name, array) for name, array in state.optim.exp_avg.items()]
    moments += [(EXP_AVG_SQ + name, array) for name, array in state.optim.exp_avg_sq.items()]
    parts += [struct.pack("<Q", state.optim.step), struct.pack("<Q", len(moments))]
    parts += [_pack_tensor(name, array) for name, array in moments]
    parts += [_pack_json(state.rng_state), _pack_json(state.config), struct.pack("<Q", state.step)]
    return b"".join(parts)


def save_checkpoint(state: CheckpointState, path: Union[str, Path]) -> str:
    """一時ファイルに書いてから置き換える"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(serialize_checkpoint(state))
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint at step {state.step} to {path}")
    return str(path)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        available = len(self.data) - self.offset
        if count > available:
            raise CheckpointFormatError(
                f"Truncated checkpoint {self.source}: expected {self.offset + count} bytes, "
                f"file has {len(self.data)}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def tensor(self):
        name = self.take(self.unpack("<H")).decode("utf-8")
        rank = self.unpack("<B")
        shape = tuple(self.unpack("<Q") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        array = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, array.astype(np.float32)

    def json(self) -> Dict[str, Any]:
        return json.loads(self.take(self.unpack("<I")).decode("utf-8"))


def deserialize_checkpoint(data: bytes, source: str = "<bytes>") -> CheckpointState:
    reader = _Reader(data, source)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointFormatError(f"Not a checkpoint {source}: magic {magic!r}, expected {MAGIC!r}")
    version = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(
            f"Unsupported checkpoint version {version} in {source}; this build reads version {VERSION}")
    params = OrderedDict(reader.tensor() for _ in range(reader.unpack("<Q")))
    optim = OptimState(step=reader.unpack("<Q"))
    for _ in range(reader.unpack("<Q")):
        name, array = reader.tensor()
        if name.startswith(EXP_AVG_SQ):
            optim.exp_avg_sq[name[len(EXP_AVG_SQ):]] = array
        elif name.startswith(EXP_AVG):
            optim.exp_avg[name[len(EXP_AVG):]] = array
        else:
            raise CheckpointFormatError(f"Unknown optimizer tensor {name!r} in {source}")
    rng_state = reader.json()
    config = reader.json()
    step = reader.unpack("<Q")
    if reader.offset != len(data):
        raise CheckpointFormatError(
            f"Trailing data in {source}: expected {reader.offset} bytes, file has {len(data)}")
    return CheckpointState(params=params, optim=optim, rng_state=rng_state, config=config, step=step)


def load_checkpoint(path: Union[str, Path]) -> CheckpointState:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    state = deserialize_checkpoint(data, str(path))
    logger.info(f"Loaded checkpoint at step {state.step} from {path}")
    return state


def check_compatible(snapshot: Mapping[str, Any], model_config, train_config=None) -> None:
    """チェックポイントの構成と現在の設定を突き合わせる"""
    checks = [(name, model_config) for name in ARCHITECTURE_FIELDS]
    if train_config is not None:
        checks += [(name, train_config) for name in PARAMETER_LAYOUT_FIELDS]
    for name, config in checks:
        if name in snapshot and snapshot[name] != getattr(config, name):
            raise ConfigMismatchError(name, snapshot[name], getattr(config, name))
