"""
CSV 数据读写
Y.csv (N×T, 表头 t1..tT)、X.csv (N×P, 具名表头)、grid.csv (单列 s)
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
import pandas as pd
from loguru import logger

from .errors import DataError
from .models import FunctionalDataset

FLOAT_FORMAT = "%.17g"
TRANSFORMS = ("none", "log1p")


def read_numeric_csv(path) -> pd.DataFrame:
    """读取带表头的数值 CSV；缺失或非数值单元格报告行号与列名"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"找不到数据文件: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"无法解析 {path.name}: {exc}") from None
    if frame.empty:
        raise DataError(f"{path.name} 没有数据行")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    blank = frame.apply(lambda col: col.str.strip().isin(["", "NA", "NaN", "nan"]))
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        column = frame.columns[col]
        if blank.iat[row, col]:
            raise DataError(f"{path.name} 第 {row + 1} 行、列 {column!r} 为缺失值")
        raise DataError(
            f"{path.name} 第 {row + 1} 行、列 {column!r} 不是数值: {frame.iat[row, col]!r}"
        )
    if not np.all(np.isfinite(numeric.to_numpy())):
        row, col = np.argwhere(~np.isfinite(numeric.to_numpy()))[0]
        raise DataError(f"{path.name} 第 {row + 1} 行、列 {frame.columns[col]!r} 不是有限值")
    return numeric.astype(float)


def apply_transform(Y: np.ndarray, transform: str) -> np.ndarray:
    if transform not in TRANSFORMS:
        raise DataError(f"未知的变换: {transform!r}")
    if transform == "none":
        return Y
    invalid = Y <= -1.0
    if invalid.any():
        row, col = np.argwhere(invalid)[0]
        raise DataError(f"log1p 要求取值 > -1：第 {row + 1} 行第 {col + 1} 列为 {Y[row, col]}")
    return np.log1p(Y)


def center_covariates(frame: pd.DataFrame, names: Iterable[str]) -> Dict[str, float]:
    """原地中心化指定协变量列，返回各列被减去的均值"""
    means: Dict[str, float] = {}
    for name in names:
        if name not in frame.columns:
            raise DataError(f"要中心化的协变量 {name!r} 不在 X.csv 中")
        means[name] = float(frame[name].mean())
        frame[name] = frame[name] - means[name]
    return means


def load_dataset(
    y_path, x_path, grid_path, transform: str = "none", center: Iterable[str] = ()
) -> tuple[FunctionalDataset, Dict[str, float]]:
    Y = read_numeric_csv(y_path)
    X = read_numeric_csv(x_path)
    grid = read_numeric_csv(grid_path)

    if len(Y) != len(X):
        raise DataError(f"Y.csv 有 {len(Y)} 行而 X.csv 有 {len(X)} 行")
    if grid.shape[1] != 1:
        raise DataError(f"grid.csv 应只有一列 s，实际有 {grid.shape[1]} 列")
    if len(grid) != Y.shape[1]:
        raise DataError(f"grid.csv 有 {len(grid)} 个点而 Y.csv 有 {Y.shape[1]} 列")

    centering = center_covariates(X, center)
    values = apply_transform(Y.to_numpy(), transform)
    logger.debug("读入数据: N={}, T={}, P={}", *values.shape, X.shape[1])
    dataset = FunctionalDataset(
        Y=values,
        grid=grid.iloc[:, 0].to_numpy(),
        X=X.to_numpy(),
        covariate_names=[str(c) for c in X.columns],
    )
    return dataset, centering


def write_csv(frame: pd.DataFrame, path, index: bool = False):
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


def save_dataset(data: FunctionalDataset, directory) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / "Y.csv", directory / "X.csv", directory / "grid.csv"]
    write_csv(
        pd.DataFrame(data.Y, columns=[f"t{k + 1}" for k in range(data.n_points)]), paths[0]
    )
    write_csv(pd.DataFrame(data.X, columns=data.covariate_names), paths[1])
    write_csv(pd.DataFrame({"s": data.grid}), paths[2])
    return paths
