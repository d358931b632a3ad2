"""
惩罚样条平滑
二阶导数惩罚的最小二乘拟合，平滑参数由 REML 选择
方程组在惩罚矩阵的特征基下求解，惩罚零空间（常数）与 λ 的量级解耦
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.optimize import minimize_scalar

from .basis import BasisSystem
from .errors import DataError, NumericError
from .models import PenalizedFit

LOG10_LAMBDA_RANGE = (-8.0, 12.0)
PRESCAN_POINTS = 41
LOG10_TOLERANCE = 1e-4
RIDGE = 1e-10
_NULL_TOLERANCE = 1e-11


@dataclass(frozen=True)
class PenaltyEigen:
    """P = U diag(e) U^T，零空间特征值精确置零"""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.values))


def penalty_eigen(penalty: np.ndarray) -> PenaltyEigen:
    values, vectors = eigh(penalty)
    tolerance = max(float(values.max()), 0.0) * _NULL_TOLERANCE * len(penalty)
    return PenaltyEigen(values=np.where(values > tolerance, values, 0.0), vectors=vectors)


class PenalizedSystem:
    """G + λP 的 Cholesky 分解；λ>0 时失败则加 1e-10 岭项重试"""

    def __init__(self, gram: np.ndarray, penalty: np.ndarray, lam: float, eigen=None):
        if lam < 0:
            raise DataError(f"平滑参数必须非负，当前为 {lam}")
        self.eigen = eigen if eigen is not None else penalty_eigen(penalty)
        self.lam = float(lam)
        U = self.eigen.vectors
        self.rotated_gram = U.T @ gram @ U
        system = self.rotated_gram + np.diag(lam * self.eigen.values)
        system = (system + system.T) / 2.0
        self.ridge_used = False
        try:
            self.factor = cho_factor(system, lower=True)
            return
        except LinAlgError:
            if lam == 0:
                raise NumericError("λ=0 时正规方程奇异：设计矩阵列不满秩") from None

        scale = max(float(np.trace(system)) / len(system), 1.0)
        logger.warning("Cholesky 分解失败，加入岭项 {:.1e} 后重试", RIDGE * scale)
        try:
            self.factor = cho_factor(system + RIDGE * scale * np.eye(len(system)), lower=True)
        except LinAlgError:
            raise NumericError("加入岭项后正规方程仍然奇异") from None
        self.ridge_used = True

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        U = self.eigen.vectors
        return U @ cho_solve(self.factor, U.T @ rhs)

    @property
    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor[0]))))

    @property
    def edf(self) -> float:
        """trace((G + λP)^{-1} G)"""
        return float(np.trace(cho_solve(self.factor, self.rotated_gram)))


def penalized_fit(y, design: np.ndarray, penalty: np.ndarray, lam: float) -> PenalizedFit:
    """argmin ||y - Dc||² + λ c^T P c

    y 可以是 T 向量，也可以是 T×m 矩阵（m 个响应共用同一分解）。
    """
    y = np.asarray(y, dtype=float)
    system = PenalizedSystem(design.T @ design, penalty, lam)
    coefficients = system.solve(design.T @ y)
    return PenalizedFit(
        coefficients=coefficients,
        lam=float(lam),
        edf=system.edf,
        fitted=design @ coefficients,
        ridge_fallback=system.ridge_used,
    )


@dataclass(frozen=True)
class RemlStatistics:
    """旋转到惩罚特征基下的充分统计量，REML 搜索中反复使用"""

    gram: np.ndarray
    cross: np.ndarray
    total_ss: float
    n_rows: int
    eigen: PenaltyEigen

    @property
    def nullity(self) -> int:
        return len(self.eigen.values) - self.eigen.rank

    @classmethod
    def from_data(cls, y: np.ndarray, design: np.ndarray, penalty: np.ndarray):
        y = y if y.ndim == 2 else y[:, None]
        eigen = penalty_eigen(penalty)
        U = eigen.vectors
        return cls(
            gram=U.T @ (design.T @ design) @ U,
            cross=U.T @ (design.T @ y),
            total_ss=float(np.sum(y * y)),
            n_rows=design.shape[0],
            eigen=eigen,
        )


def reml_criterion(log10_lam: float, stats: RemlStatistics) -> float:
    """负 REML（去掉常数项），越小越好"""
    lam = 10.0**log10_lam
    try:
        factor = cho_factor(stats.gram + np.diag(lam * stats.eigen.values), lower=True)
    except LinAlgError:
        return np.inf
    coefficients = cho_solve(factor, stats.cross)
    penalized_rss = stats.total_ss - float(np.sum(coefficients * stats.cross))
    # 完全落在样条空间内的数据会让残差平方和为零
    penalized_rss = max(penalized_rss, 1e-12 * stats.total_ss + 1e-300)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return (
        (stats.n_rows - stats.nullity) * np.log(penalized_rss)
        + log_det
        - stats.eigen.rank * np.log(lam)
    )


def reml_lambda(y, design: np.ndarray, penalty: np.ndarray) -> float:
    """在 log10(λ) ∈ [-8, 12] 上最大化 Gaussian REML

    先在 41 点网格上粗扫定出区间，再在相邻网格点之间做有界一维搜索（容差 1e-4）。
    y 为矩阵时各列视为共享 λ 的独立响应。
    """
    y = np.asarray(y, dtype=float)
    if design.shape[0] <= design.shape[1]:
        raise DataError(
            f"REML 需要网格点数 T={design.shape[0]} 大于基函数个数 J={design.shape[1]}"
        )
    stats = RemlStatistics.from_data(y, design, penalty)

    prescan = np.linspace(*LOG10_LAMBDA_RANGE, PRESCAN_POINTS)
    values = np.array([reml_criterion(r, stats) for r in prescan])
    finite = np.isfinite(values)
    if not finite.any():
        raise NumericError("REML 准则在整个搜索区间内均非有限值")
    if not finite.all():
        logger.warning("REML 准则在 {} 个网格点上非有限", int((~finite).sum()))
        values = np.where(finite, values, np.inf)

    best = int(np.argmin(values))
    lo = prescan[max(best - 1, 0)]
    hi = prescan[min(best + 1, PRESCAN_POINTS - 1)]
    result = minimize_scalar(
        reml_criterion,
        bounds=(lo, hi),
        args=(stats,),
        method="bounded",
        options={"xatol": LOG10_TOLERANCE},
    )
    log10_lam = float(result.x)
    if not np.isfinite(result.fun) or result.fun > values[best]:
        log10_lam = float(prescan[best])

    logger.debug("REML 选择 log10(λ)={:.4f}", log10_lam)
    return 10.0**log10_lam


def smooth_fit(values, grid, basis: BasisSystem) -> PenalizedFit:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DataError("待平滑的数值中含有非有限值")
    design = basis.design_for(grid)
    lam = reml_lambda(values, design, basis.penalty)
    return penalized_fit(values, design, basis.penalty, lam)


def smooth_curve(values, grid, basis: BasisSystem) -> np.ndarray:
    """REML 选 λ 后做惩罚拟合，返回网格上的拟合值"""
    return smooth_fit(values, grid, basis).fitted
