"""
条件矩曲面
由拟合好的 MomentModel 组装协方差、相关、滞后相关、偏度和超额峰度曲线
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional

import numpy as np
from loguru import logger
from scipy import stats

from .basis import BasisSystem
from .errors import ConfigError, DataError, NumericError
from .fosr import fit_fosr
from .models import (
    ConditionalCurve,
    CorrelationModel,
    CurveKind,
    FoSRFit,
    FourthMomentModel,
    FunctionalDataset,
    ScoreSet,
    ThirdMomentModel,
    VarianceModel,
)
from .momentfit import (
    fit_correlation_eigenmodel,
    fit_fourth_moments,
    fit_third_moments,
    fit_variance_model,
    scale_and_correlate,
)
from .scores import extract_scores
from .smooth import smooth_curve

_BLOCK_ELEMENTS = 4_000_000


class FitStage(IntEnum):
    """拟合流程阶段，后一阶段依赖前一阶段"""

    FOSR = 1
    SCORES = 2
    MOMENTS = 3


@dataclass
class MomentModel:
    """拟合结果汇总：固定效应、噪声方差、得分方差、相关、三阶/四阶矩"""

    basis: BasisSystem
    fosr: FoSRFit
    covariate_names: List[str] = field(default_factory=list)
    scores: Optional[ScoreSet] = None
    sigma2_eps: Optional[np.ndarray] = None
    variance: Optional[VarianceModel] = None
    correlation: Optional[CorrelationModel] = None
    third: Optional[ThirdMomentModel] = None
    fourth: Optional[FourthMomentModel] = None

    @property
    def grid(self) -> np.ndarray:
        return self.basis.grid

    @property
    def beta(self) -> np.ndarray:
        return self.fosr.beta_smooth

    @property
    def stage(self) -> FitStage:
        if self.variance is not None and self.correlation is not None:
            return FitStage.MOMENTS
        if self.sigma2_eps is not None:
            return FitStage.SCORES
        return FitStage.FOSR

    def require(self, stage: FitStage):
        if self.stage < stage:
            raise ConfigError(
                f"模型只拟合到 {self.stage.name} 阶段，无法计算需要 {stage.name} 的量"
            )


def fit_moment_model(
    data: FunctionalDataset,
    basis: BasisSystem,
    stage: FitStage = FitStage.MOMENTS,
    eigenmodel: bool = False,
) -> MomentModel:
    """顺序拟合：FoSR → 得分 → 矩回归，停在 stage 指定的阶段"""
    if len(basis.grid) != data.n_points or not np.allclose(basis.grid, data.grid):
        raise DataError("基函数网格与数据网格不一致")

    fosr = fit_fosr(data, basis)
    model = MomentModel(basis=basis, fosr=fosr, covariate_names=list(data.covariate_names))
    if stage < FitStage.SCORES:
        return model

    score_set = extract_scores(fosr.residuals, basis)
    model.scores = score_set
    model.sigma2_eps = score_set.sigma2_eps
    if stage < FitStage.MOMENTS:
        return model

    model.variance = fit_variance_model(score_set.xi, data.X)
    xi_star, C = scale_and_correlate(score_set.xi, data.X, model.variance)
    if eigenmodel:
        model.correlation = fit_correlation_eigenmodel(xi_star, data.X, C)
    else:
        model.correlation = CorrelationModel(C=C)
    model.third = fit_third_moments(xi_star, data.X)
    model.fourth = fit_fourth_moments(xi_star, data.X)
    logger.debug("矩模型拟合完成: N={}, T={}, J={}", data.n_subjects, data.n_points, basis.n_basis)
    return model


def _covariate(model: MomentModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if len(x) != model.beta.shape[0]:
        raise DataError(f"协变量向量长度 {len(x)} 与模型的 {model.beta.shape[0]} 个协变量不一致")
    return x


def _scaled_design(model: MomentModel, x: np.ndarray) -> np.ndarray:
    """v(s) = diag(exp(x^T γ / 2)) φ(s)，按行堆成 T×J"""
    return model.basis.design * model.variance.scale(x)


def mean_curve(model: MomentModel, x) -> np.ndarray:
    return _covariate(model, x) @ model.beta


def random_effect_variance(model: MomentModel, x) -> np.ndarray:
    """Var_b(s|x)，不含噪声方差"""
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    V = _scaled_design(model, x)
    return np.sum((V @ model.correlation.at(x)) * V, axis=1)


def variance_curve(model: MomentModel, x) -> np.ndarray:
    """Σ(s,s|x)，包含噪声方差"""
    return random_effect_variance(model, x) + model.sigma2_eps


def conditional_covariance_matrix(model: MomentModel, x) -> np.ndarray:
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    V = _scaled_design(model, x)
    sigma = V @ model.correlation.at(x) @ V.T
    sigma[np.diag_indices_from(sigma)] += model.sigma2_eps
    return (sigma + sigma.T) / 2.0


def conditional_covariance(model: MomentModel, x, s1: int, s2: int) -> float:
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    V = _scaled_design(model, x)
    value = float(V[s1] @ model.correlation.at(x) @ V[s2])
    if s1 == s2:
        value += float(model.sigma2_eps[s1])
    return value


def conditional_correlation(model: MomentModel, x, s1: int, s2: int) -> float:
    var1 = conditional_covariance(model, x, s1, s1)
    var2 = conditional_covariance(model, x, s2, s2)
    if var1 <= 0 or var2 <= 0:
        raise NumericError(f"网格点 {s1 if var1 <= 0 else s2} 处条件方差为零")
    return conditional_covariance(model, x, s1, s2) / np.sqrt(var1 * var2)


def lag_steps(model: MomentModel, lag: float) -> int:
    """把定义域单位的滞后换算成网格步数；要求网格等距覆盖一个周期"""
    grid = model.grid
    spacing = model.basis.period / len(grid)
    if len(grid) > 1 and not np.allclose(np.diff(grid), spacing, rtol=1e-8, atol=1e-12):
        raise DataError("滞后相关要求网格在一个周期上等距分布")
    return int(round(lag / spacing))


def lag_correlation(model: MomentModel, x, s: int, lag: float) -> float:
    """ρ(s, s+lag | x)，跨越周期端点时回绕"""
    partner = (s + lag_steps(model, lag)) % len(model.grid)
    return conditional_correlation(model, x, s, partner)


def lag_correlation_curve(model: MomentModel, x, lag: float) -> np.ndarray:
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    steps = lag_steps(model, lag) % len(model.grid)
    V = _scaled_design(model, x)
    partner = np.roll(V, -steps, axis=0)
    covariance = np.sum((V @ model.correlation.at(x)) * partner, axis=1)
    variance = variance_curve(model, x)
    if steps == 0:
        covariance = covariance + model.sigma2_eps
    denominator = variance * np.roll(variance, -steps)
    if np.any(denominator <= 0):
        raise NumericError("条件方差为零，相关系数无定义")
    return covariance / np.sqrt(denominator)


def _tuple_sum(V: np.ndarray, tuples: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    """Σ_m coefficients_m Π_k V[:, tuples[m, k]]，按块计算"""
    n_points, order = V.shape[0], tuples.shape[1]
    block = max(1, _BLOCK_ELEMENTS // max(n_points * order, 1))
    total = np.zeros(n_points)
    for start in range(0, len(tuples), block):
        chunk = tuples[start : start + block]
        total += np.prod(V[:, chunk], axis=2) @ coefficients[start : start + block]
    return total


def third_moment_curve(model: MomentModel, x) -> np.ndarray:
    """E[{Y(s) - E Y(s)}³ | x]"""
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    third = model.third
    return _tuple_sum(
        _scaled_design(model, x),
        third.tuples,
        third.weights * third.expected_products(x),
    )


def skewness_curve(model: MomentModel, x) -> np.ndarray:
    denominator = variance_curve(model, x)
    if np.any(denominator <= 0):
        raise NumericError("条件方差为零，偏度无定义")
    return third_moment_curve(model, x) / denominator**1.5


def fourth_moment_curve(model: MomentModel, x) -> np.ndarray:
    """K(s) + 3σ⁴_ε + 6σ²_ε Var_b(s|x)"""
    model.require(FitStage.MOMENTS)
    x = _covariate(model, x)
    fourth = model.fourth
    K = _tuple_sum(
        _scaled_design(model, x),
        fourth.tuples,
        fourth.weights * fourth.expected_products(x),
    )
    sigma2 = model.sigma2_eps
    return K + 3.0 * sigma2**2 + 6.0 * sigma2 * random_effect_variance(model, x)


def excess_kurtosis_curve(model: MomentModel, x) -> np.ndarray:
    denominator = variance_curve(model, x) ** 2
    if np.any(denominator <= 0):
        raise NumericError("条件方差为零，峰度无定义")
    return fourth_moment_curve(model, x) / denominator - 3.0


def conditional_skewness(model: MomentModel, x, s: int) -> float:
    return float(skewness_curve(model, x)[s])


def conditional_kurtosis(model: MomentModel, x, s: int) -> float:
    """超额峰度（原始四阶标准矩减 3）"""
    return float(excess_kurtosis_curve(model, x)[s])


def variance_ratio_curve(model: MomentModel, x1, x2) -> np.ndarray:
    numerator = variance_curve(model, x1)
    denominator = variance_curve(model, x2)
    if np.any(denominator <= 0) or np.any(numerator <= 0):
        raise NumericError("条件方差为零，方差比无定义")
    return numerator / denominator


def variance_ratio(model: MomentModel, x1, x2, s: int) -> float:
    return float(variance_ratio_curve(model, x1, x2)[s])


def conditional_curve(
    model: MomentModel,
    x,
    kind: CurveKind,
    lag: float | None = None,
    x2=None,
) -> ConditionalCurve:
    x = _covariate(model, x)
    if kind == CurveKind.MEAN:
        values = mean_curve(model, x)
    elif kind == CurveKind.VARIANCE:
        values = variance_curve(model, x)
    elif kind == CurveKind.SD:
        values = np.sqrt(variance_curve(model, x))
    elif kind == CurveKind.CORRELATION:
        if lag is None:
            raise ConfigError("滞后相关曲线需要指定 lag")
        values = lag_correlation_curve(model, x, lag)
    elif kind == CurveKind.SKEWNESS:
        values = skewness_curve(model, x)
    elif kind == CurveKind.EXCESS_KURTOSIS:
        values = excess_kurtosis_curve(model, x)
    elif kind == CurveKind.VARIANCE_RATIO:
        if x2 is None:
            raise ConfigError("方差比曲线需要第二个协变量向量")
        x2 = _covariate(model, x2)
        values = variance_ratio_curve(model, x, x2)
    else:
        raise ConfigError(f"未知的曲线类型: {kind}")
    return ConditionalCurve(covariate=x, kind=kind, values=values, lag=lag, covariate2=x2)


def empirical_moment_curves(
    Y: np.ndarray, basis: BasisSystem, groups=None
) -> Dict[str, Dict[str, np.ndarray]]:
    """分组计算逐点样本均值、标准差、偏度、超额峰度并做周期样条平滑"""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    labels = np.array(["all"] * len(Y)) if groups is None else np.asarray(groups).astype(str)
    if len(labels) != len(Y):
        raise DataError(f"分组标签 {len(labels)} 个，Y 有 {len(Y)} 行")

    curves: Dict[str, Dict[str, np.ndarray]] = {}
    for label in sorted(set(labels.tolist())):
        rows = Y[labels == label]
        if len(rows) < 4:
            raise DataError(f"分组 {label!r} 只有 {len(rows)} 个受试者，至少需要 4 个")
        raw = {
            "mean": rows.mean(axis=0),
            "sd": rows.std(axis=0, ddof=1),
            "skewness": np.nan_to_num(stats.skew(rows, axis=0)),
            "excess_kurtosis": np.nan_to_num(stats.kurtosis(rows, axis=0, fisher=True)),
        }
        curves[label] = {
            name: smooth_curve(values, basis.grid, basis) for name, values in raw.items()
        }
    return curves
