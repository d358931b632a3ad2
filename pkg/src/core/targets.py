"""
自助法目标曲线
文本形式：
    beta:0 / beta:x2          第 p 个固定效应函数
    sigma2_eps                噪声方差函数
    variance:1,-10,0,0        协变量 x 处的条件曲线（mean/variance/sd/skewness/excess_kurtosis）
    correlation:1,-10,0,0@0.25  滞后相关，@ 后为定义域单位的滞后
    variance_ratio:1,-10,0,0;1,10,0,0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError
from .models import CurveKind
from .surface import FitStage, MomentModel, conditional_curve

BETA = "beta"
SIGMA2_EPS = "sigma2_eps"


def parse_vector(text: str) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"无法解析协变量向量: {text!r}") from None
    if not values:
        raise ConfigError("协变量向量为空")
    return values


def format_vector(values) -> str:
    return ",".join(f"{v:g}" for v in values)


@dataclass(frozen=True)
class TargetSpec:
    """一个可在任意 MomentModel 上求值的 T 点曲线"""

    kind: str
    coefficient: Optional[str] = None
    covariate: Optional[Tuple[float, ...]] = None
    covariate2: Optional[Tuple[float, ...]] = None
    lag: Optional[float] = None

    @classmethod
    def parse(cls, text: str) -> "TargetSpec":
        text = text.strip()
        head, _, body = text.partition(":")
        head = head.strip()
        if head == SIGMA2_EPS:
            return cls(kind=SIGMA2_EPS)
        if head == BETA:
            if not body.strip():
                raise ConfigError(f"目标 {text!r} 缺少系数下标或名称")
            return cls(kind=BETA, coefficient=body.strip())

        try:
            kind = CurveKind(head)
        except ValueError:
            raise ConfigError(f"未知的目标类型: {head!r}") from None
        if not body.strip():
            raise ConfigError(f"目标 {text!r} 缺少协变量向量")

        if kind == CurveKind.CORRELATION:
            vector, sep, lag = body.partition("@")
            if not sep:
                raise ConfigError(f"滞后相关目标 {text!r} 需要 @lag")
            try:
                lag_value = float(lag)
            except ValueError:
                raise ConfigError(f"无法解析滞后: {lag!r}") from None
            return cls(kind=kind.value, covariate=parse_vector(vector), lag=lag_value)
        if kind == CurveKind.VARIANCE_RATIO:
            first, sep, second = body.partition(";")
            if not sep:
                raise ConfigError(f"方差比目标 {text!r} 需要两个以 ; 分隔的协变量向量")
            return cls(
                kind=kind.value,
                covariate=parse_vector(first),
                covariate2=parse_vector(second),
            )
        return cls(kind=kind.value, covariate=parse_vector(body))

    @property
    def label(self) -> str:
        if self.kind == SIGMA2_EPS:
            return SIGMA2_EPS
        if self.kind == BETA:
            return f"{BETA}:{self.coefficient}"
        return f"{self.parameter}:{self.probe}"

    @property
    def parameter(self) -> str:
        if self.kind == BETA:
            return f"{BETA}{self.coefficient}"
        return self.kind

    @property
    def probe(self) -> str:
        if self.covariate is None:
            return ""
        text = format_vector(self.covariate)
        if self.covariate2 is not None:
            text += ";" + format_vector(self.covariate2)
        if self.lag is not None:
            text += f"@{self.lag:g}"
        return text

    @property
    def required_stage(self) -> FitStage:
        if self.kind == BETA or self.kind == CurveKind.MEAN.value:
            return FitStage.FOSR
        if self.kind == SIGMA2_EPS:
            return FitStage.SCORES
        return FitStage.MOMENTS

    def coefficient_index(self, names) -> int:
        names = list(names)
        if self.coefficient in names:
            return names.index(self.coefficient)
        try:
            index = int(self.coefficient)
        except (TypeError, ValueError):
            raise ConfigError(
                f"未知的系数 {self.coefficient!r}，可用: {', '.join(names)}"
            ) from None
        if not 0 <= index < len(names):
            raise ConfigError(f"系数下标 {index} 超出范围 [0, {len(names) - 1}]")
        return index

    def evaluate(self, model: MomentModel) -> np.ndarray:
        if self.kind == BETA:
            return model.beta[self.coefficient_index(model.covariate_names)].copy()
        if self.kind == SIGMA2_EPS:
            model.require(FitStage.SCORES)
            return np.asarray(model.sigma2_eps, dtype=float).copy()
        curve = conditional_curve(
            model,
            np.array(self.covariate),
            CurveKind(self.kind),
            lag=self.lag,
            x2=None if self.covariate2 is None else np.array(self.covariate2),
        )
        return curve.values


def deepest_stage(targets) -> FitStage:
    return max((t.required_stage for t in targets), default=FitStage.FOSR)
