from typing import Optional, Sequence


class PcpMaeError(Exception):
    """パッケージ共通の基底例外"""


class ShapeError(PcpMaeError, ValueError):
    """形状が合わない場合の例外"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class ContractError(PcpMaeError, ValueError):
    """事前条件違反"""


class ConfigError(PcpMaeError, ValueError):
    """設定値の誤り"""


class ConfigMismatchError(PcpMaeError):
    """チェックポイントと設定の不整合"""

    def __init__(self, field: str, checkpoint_value, config_value):
        super().__init__(
            f"Incompatible {field}: checkpoint has {checkpoint_value}, config has {config_value}"
        )
        self.field = field
        self.checkpoint_value = checkpoint_value
        self.config_value = config_value


class ParseError(PcpMaeError, ValueError):
    """ファイルやグリッド定義の解析エラー"""

    def __init__(self, message: str, line: Optional[int] = None, cell: Optional[int] = None,
                 source: Optional[str] = None):
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if cell is not None:
            where.append(f"cell {cell}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.cell = cell


class CheckpointFormatError(PcpMaeError):
    """チェックポイントのフォーマットエラー"""


class NonFiniteLossError(PcpMaeError, FloatingPointError):
    """損失が有限でなくなった場合の例外"""

    def __init__(self, step: int, losses: dict, dump_path: Optional[str] = None):
        detail = ", ".join(f"{k}={v}" for k, v in losses.items())
        message = f"Non-finite loss at step {step} ({detail})"
        if dump_path:
            message += f"; step dump written to {dump_path}"
        super().__init__(message)
        self.step = step
        self.losses = losses
        self.dump_path = dump_path
