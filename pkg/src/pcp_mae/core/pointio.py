"""ASCII の XYZ / PLY 読み書き"""
from pathlib import Path
from typing import List, Optional, Tuple, Union
import logging

import numpy as np

from .errors import ParseError
from .types import PointCloud

logger = logging.getLogger("pcp_mae.pointio")

PathLike = Union[str, Path]


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def read_xyz(path: PathLike) -> PointCloud:
    """1 行 1 点の "x y z" を読む。'#' で始まる行は無視する"""
    rows: List[List[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 3:
                raise ParseError(f"expected 3 values, got {len(fields)}", line=line_no, source=str(path))
            try:
                rows.append([float(v) for v in fields])
            except ValueError:
                raise ParseError(f"non-numeric value in {text!r}", line=line_no, source=str(path)) from None
    if not rows:
        raise ParseError("no points found", source=str(path))
    return PointCloud(np.array(rows))


def write_xyz(cloud: PointCloud, path: PathLike) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in cloud.points:
            f.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
    logger.debug(f"Wrote {len(cloud)} points to {path}")
    return str(path)


def write_ply(cloud: Union[PointCloud, np.ndarray], path: PathLike,
              colors: Optional[np.ndarray] = None) -> str:
    """ASCII PLY 1.0 を書く。colors は p×3 の 0-255 整数。配列なら 0 点も書ける"""
    if isinstance(cloud, PointCloud):
        points = cloud.points
    else:
        points = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.int64).reshape(len(points), 3)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(header) + "\n")
        for i, (x, y, z) in enumerate(points):
            line = f"{_fmt(x)} {_fmt(y)} {_fmt(z)}"
            if colors is not None:
                r, g, b = np.clip(colors[i], 0, 255)
                line += f" {r} {g} {b}"
            f.write(line + "\n")
    logger.debug(f"Wrote PLY with {len(points)} vertices to {path}")
    return str(path)


def read_ply(path: PathLike) -> Tuple[PointCloud, Optional[np.ndarray]]:
    """write_ply 形式の ASCII PLY を検証しながら読む"""
    points, colors = read_ply_points(path)
    if len(points) == 0:
        raise ParseError("PLY has no vertices", source=str(path))
    return PointCloud(points), colors


def read_ply_points(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """read_ply と同じだが p×3 の配列を返し、0 点の PLY も受け付ける"""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1, source=str(path))
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        raise ParseError("expected 'format ascii 1.0'", line=2, source=str(path))
    count: Optional[int] = None
    properties: List[str] = []
    body_start = None
    for line_no, line in enumerate(lines[2:], start=3):
        fields = line.split()
        if not fields or fields[0] == "comment":
            continue
        if fields[0] == "element" and len(fields) == 3 and fields[1] == "vertex":
            count = int(fields[2])
        elif fields[0] == "property" and len(fields) == 3:
            properties.append(fields[2])
        elif fields[0] == "end_header":
            body_start = line_no
            break
        else:
            raise ParseError(f"unexpected header line {line!r}", line=line_no, source=str(path))
    if body_start is None or count is None:
        raise ParseError("incomplete PLY header", source=str(path))
    if properties[:3] != ["x", "y", "z"] or properties[3:] not in ([], ["red", "green", "blue"]):
        raise ParseError(f"unsupported vertex properties {properties}", source=str(path))
    body = lines[body_start:body_start + count]
    if len(body) != count:
        raise ParseError(f"expected {count} vertices, found {len(body)}", source=str(path))
    values = []
    for offset, line in enumerate(body):
        fields = line.split()
        if len(fields) != len(properties):
            raise ParseError(f"expected {len(properties)} values, got {len(fields)}",
                             line=body_start + offset + 1, source=str(path))
        values.append([float(v) for v in fields])
    data = np.array(values, dtype=np.float64).reshape(count, len(properties))
    colors = data[:, 3:6].astype(np.int64) if len(properties) == 6 else None
    return data[:, :3], colors
