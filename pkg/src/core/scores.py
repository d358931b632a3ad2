"""
得分提取与噪声方差估计
"""

from __future__ import annotations

import numpy as np
from loguru import logger

from .basis import BasisSystem
from .errors import DataError
from .models import ScoreSet
from .smooth import PenalizedSystem, reml_lambda, smooth_curve

NOISE_VARIANCE_FLOOR = 1e-8


def extract_scores(
    residuals: np.ndarray, basis: BasisSystem, lam: float | None = None
) -> ScoreSet:
    """将残差曲线对基函数做惩罚回归，得到每个受试者的得分

    所有受试者共享一个 λ（堆叠回归上的 REML），方程组只分解一次。
    lam 给定时跳过 REML。
    """
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    design = basis.design_for(basis.grid)
    n_points, n_basis = design.shape
    if residuals.shape[1] != n_points:
        raise DataError(
            f"残差有 {residuals.shape[1]} 列，与基函数网格长度 {n_points} 不一致"
        )
    if n_points < n_basis:
        raise DataError(f"网格点数 T={n_points} 少于基函数个数 J={n_basis}")

    if lam is None:
        if n_points == n_basis:
            lam = 0.0
        else:
            lam = reml_lambda(residuals.T, design, basis.penalty)
    logger.debug("得分提取共享 λ={:.3g}", lam)

    system = PenalizedSystem(design.T @ design, basis.penalty, lam)
    # 稀疏带状基矩阵与稠密残差的乘积
    cross = np.asarray(basis.design_sparse.T @ residuals.T)
    xi = system.solve(cross).T
    noise = residuals - xi @ design.T

    return ScoreSet(
        xi=xi,
        lambda_scores=float(lam),
        noise=noise,
        sigma2_eps=estimate_noise_variance(noise, basis.grid, basis),
    )


def estimate_noise_variance(noise: np.ndarray, grid, basis: BasisSystem) -> np.ndarray:
    """逐点平均平方噪声经周期样条平滑，下限 1e-8"""
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    mean_square = np.mean(noise**2, axis=0)
    if not np.any(mean_square > 0):
        return np.full(mean_square.shape, NOISE_VARIANCE_FLOOR)
    fitted = smooth_curve(mean_square, grid, basis)
    return np.maximum(fitted, NOISE_VARIANCE_FLOOR)
