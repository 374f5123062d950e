from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union
import json
import logging
import os

import numpy as np
from rich.logging import RichHandler

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ROOT_LOGGER = 'pcp_mae'


class RunUtils:
    """実行結果の JSON 入出力とログ出力を管理するユーティリティクラス"""

    def __init__(self, log_dir: Optional[Union[str, Path]] = None, level: Optional[str] = None):
        if log_dir is not None:
            self._setup_logging(Path(log_dir), level or os.getenv("LOG_LEVEL", "INFO"))
        self.logger = logging.getLogger(f'{ROOT_LOGGER}.run')

    def _setup_logging(self, log_dir: Path, level: str):
        """ログ出力の設定 (ファイルと rich コンソール)"""
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / 'pcp_mae.log'

        logger = logging.getLogger(ROOT_LOGGER)
        logger.setLevel(level.upper())
        # 前回の実行で登録したハンドラは外す
        for handler in list(logger.handlers):
            if hasattr(handler, '_pcp_mae_log_file') or isinstance(handler, RichHandler):
                logger.removeHandler(handler)
                handler.close()

        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler._pcp_mae_log_file = str(log_file)

        console_handler = RichHandler(show_path=False, rich_tracebacks=False)

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)

    @staticmethod
    def serialize(obj: Any) -> Any:
        """json.dump の default に渡すシリアライズ処理"""
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, Path):
            return str(obj)
        raise TypeError(f'Type {type(obj)} is not JSON serializable')

    def dump_json(self, data: Dict, file_path: Union[str, Path]) -> str:
        """JSON データを一時ファイル経由で置き換え保存する"""
        file_path = Path(file_path)
        try:
            file_path.parent.mkdir(parents=True, exist_ok=True)
            tmp_path = file_path.with_name(file_path.name + '.tmp')
            with open(tmp_path, 'w', encoding='utf-8') as f:
                json.dump(data, f, default=self.serialize, ensure_ascii=False, indent=2)
            os.replace(tmp_path, file_path)
            self.logger.debug(f'Saved {file_path}')
            return str(file_path)
        except Exception as e:
            self.logger.error(f'Failed to save {file_path}: {str(e)}', exc_info=True)
            raise

    def load_json(self, file_path: Union[str, Path]) -> Dict:
        """JSON ファイルからデータを読み込み"""
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except Exception as e:
            self.logger.error(f'Failed to load {file_path}: {str(e)}', exc_info=True)
            raise
