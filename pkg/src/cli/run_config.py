"""
运行配置
平面 key = value 文本文件，# 开头为注释；未知键直接报错
列表项以空白分隔，协变量向量列表以 ; 分隔
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, get_type_hints

from src.core.bands import minimum_replicates
from src.core.dataset_io import TRANSFORMS
from src.core.errors import ConfigError
from src.core.models import BandKind
from src.core.sim import TRUTH_DRAWS, TRUTH_SEED
from src.core.targets import TargetSpec, parse_vector

CMA_KINDS = (BandKind.CMA_SYMMETRIC.value, BandKind.CMA_ASYMMETRIC.value)


def _default_threads() -> int:
    return max(os.cpu_count() or 1, 1)


@dataclass
class RunConfig:
    """所有子命令共用的运行配置"""

    # 基函数
    degree: int = 3
    n_knots: int = 5
    boundary: List[float] = field(default_factory=lambda: [0.0, 1.0])
    # 预处理
    transform: str = "none"
    center: List[str] = field(default_factory=list)
    # 拟合与推断
    eigenmodel: bool = False
    B: int = 100
    alpha: float = 0.05
    bands: List[str] = field(default_factory=lambda: [kind.value for kind in BandKind])
    seed: int = 0
    threads: int = field(default_factory=_default_threads)
    targets: List[str] = field(
        default_factory=lambda: [
            "beta:0",
            "beta:1",
            "beta:2",
            "beta:3",
            "sigma2_eps",
            "variance:1,-10,0,0",
            "variance:1,10,0,0",
        ]
    )
    probes: List[List[float]] = field(
        default_factory=lambda: [[1.0, -10.0, 0.0, 0.0], [1.0, 10.0, 0.0, 0.0]]
    )
    lags: List[float] = field(default_factory=lambda: [0.25])
    # 输入输出
    y: str = "Y.csv"
    x: str = "X.csv"
    grid: str = "grid.csv"
    fit_dir: str = "fit"
    groups: str = ""
    out: str = "out"
    # 模拟
    N: int = 100
    K: int = 144
    replicates: int = 50
    cells: List[str] = field(default_factory=list)
    include_scores: bool = True
    include_noise: bool = True
    gaussian_scores: bool = False
    truth_draws: int = TRUTH_DRAWS
    truth_seed: int = TRUTH_SEED

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"找不到配置文件: {path}")
        values: Dict[str, str] = {}
        with open(path, "r", encoding="utf-8") as f:
            for number, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path.name} 第 {number} 行缺少 '=': {raw.strip()!r}")
                values[key.strip()] = value.strip()
        config = cls()
        config.update(values)
        return config

    def update(self, values: Dict[str, Any]):
        """按字段类型转换并覆盖取值；值为 None 的键跳过"""
        hints = get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"未知的配置项: {', '.join(unknown)}")
        for key, value in values.items():
            if value is None:
                continue
            setattr(self, key, _coerce(key, value, hints[key]))
        return self

    def validate(self, cma: bool | None = None) -> "RunConfig":
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha 必须在 (0, 1) 内，当前为 {self.alpha}")
        if self.B < 2:
            raise ConfigError(f"B 必须 >= 2，当前为 {self.B}")
        wants_cma = any(kind in CMA_KINDS for kind in self.bands) if cma is None else cma
        if wants_cma and self.B < minimum_replicates(self.alpha):
            raise ConfigError(
                f"CMA 置信带在 alpha={self.alpha} 时要求 B >= {minimum_replicates(self.alpha)}，"
                f"当前为 {self.B}"
            )
        unknown_bands = sorted(set(self.bands) - {kind.value for kind in BandKind})
        if unknown_bands:
            raise ConfigError(f"未知的置信带类型: {', '.join(unknown_bands)}")
        if not self.bands:
            raise ConfigError("bands 至少需要一种置信带")
        if self.degree < 1:
            raise ConfigError(f"degree 必须 >= 1，当前为 {self.degree}")
        if self.n_knots < self.degree + 1:
            raise ConfigError(f"n_knots 必须 >= degree + 1 = {self.degree + 1}")
        if len(self.boundary) != 2 or not self.boundary[1] > self.boundary[0]:
            raise ConfigError(f"boundary 必须是两个递增的数，当前为 {self.boundary}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform 必须是 {'/'.join(TRANSFORMS)}，当前为 {self.transform!r}")
        if self.threads < 1:
            raise ConfigError(f"threads 必须 >= 1，当前为 {self.threads}")
        if self.seed < 0:
            raise ConfigError(f"seed 必须非负，当前为 {self.seed}")
        if self.replicates < 1:
            raise ConfigError(f"replicates 必须 >= 1，当前为 {self.replicates}")
        for text in self.targets:
            TargetSpec.parse(text)
        self.coverage_cells()
        return self

    def band_kinds(self) -> List[BandKind]:
        return [BandKind(kind) for kind in self.bands]

    def coverage_cells(self) -> List[tuple[int, int]]:
        """cells 写作 "100x144"；为空时使用 (N, K)"""
        if not self.cells:
            return [(self.N, self.K)]
        parsed = []
        for text in self.cells:
            n, sep, k = text.lower().partition("x")
            try:
                parsed.append((int(n), int(k)))
            except ValueError:
                raise ConfigError(f"无法解析实验单元 {text!r}，应写作 NxK") from None
            if not sep:
                raise ConfigError(f"无法解析实验单元 {text!r}，应写作 NxK")
        return parsed

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """规范化 JSON 的 SHA-256；线程数不影响结果，不计入"""
        payload = {k: v for k, v in self.to_dict().items() if k != "threads"}
        text = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _coerce(key: str, value: Any, hint):
    if not isinstance(value, str):
        return value
    try:
        if hint is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return value
        if hint == List[float]:
            return list(parse_vector(value))
        if hint == List[str]:
            return value.split()
        if hint == List[List[float]]:
            return [list(parse_vector(item)) for item in value.split(";") if item.strip()]
    except (ValueError, ConfigError):
        raise ConfigError(f"配置项 {key} 的取值 {value!r} 无法解析") from None
    raise ConfigError(f"配置项 {key} 的类型不受支持")
