from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import csv
import hashlib
import json
import os

from .errors import ContractError
from .run_utils import RunUtils

CSV_COLUMNS = ("epoch", "loss", "loss_pc", "loss_recon", "lr")
TIMESTAMP_FIELDS = ("started_at", "finished_at")


@dataclass
class RunManifest:
    """1 回の実行の記録 (コマンド、設定、エポックごとの指標、出力先)"""
    command: str
    config: Dict[str, Any]
    seed: int
    started_at: datetime = field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None
    rows: List[Dict[str, Any]] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)

    def add_row(self, row: Dict[str, Any]) -> None:
        """エポック番号が単調増加でなければ拒否する"""
        epoch = row.get("epoch")
        if epoch is None:
            raise ContractError("manifest rows need an 'epoch' field")
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ContractError(f"epoch {epoch} does not follow {self.rows[-1]['epoch']}")
        self.rows.append(dict(row))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        data = dict(data)
        for key in TIMESTAMP_FIELDS:
            if isinstance(data.get(key), str):
                data[key] = datetime.fromisoformat(data[key])
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        return cls.from_dict(RunUtils().load_json(path))

    def flush_partial(self, path: Union[str, Path]) -> str:
        """途中経過を <path>.partial に書き出す"""
        path = Path(path)
        return RunUtils().dump_json(self.to_dict(), path.with_name(path.name + ".partial"))

    def finalize(self, path: Union[str, Path]) -> str:
        """終了時刻を記録して原子的に書き出し、.partial を消す"""
        path = Path(path)
        self.finished_at = datetime.now()
        written = RunUtils().dump_json(self.to_dict(), path)
        partial = path.with_name(path.name + ".partial")
        if partial.exists():
            os.remove(partial)
        RunUtils().logger.info(f"Wrote manifest {written}")
        return written

    def write_csv(self, path: Union[str, Path], columns: Sequence[str] = CSV_COLUMNS) -> str:
        return write_table(self.rows, path, columns)

    def fingerprint(self) -> str:
        """タイムスタンプを除いた内容の sha256"""
        data = self.to_dict()
        for key in TIMESTAMP_FIELDS:
            data.pop(key, None)
        encoded = json.dumps(data, sort_keys=True, default=RunUtils.serialize).encode("utf-8")
        return hashlib.sha256(encoded).hexdigest()


def write_table(rows: Sequence[Dict[str, Any]], path: Union[str, Path], columns: Sequence[str]) -> str:
    """rows を CSV に書く。一時ファイルから置き換える"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in columns})
    os.replace(tmp_path, path)
    return str(path)
