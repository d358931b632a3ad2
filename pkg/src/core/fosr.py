"""
函数对标量回归（FoSR）
逐点 OLS 后对每个系数函数单独做 REML 平滑
"""

from __future__ import annotations

import numpy as np
from loguru import logger
from scipy.linalg import qr, solve_triangular

from .basis import BasisSystem
from .errors import DataError, RankDeficientError
from .models import FoSRFit, FunctionalDataset
from .smooth import penalized_fit, smooth_fit

_RANK_TOLERANCE = 1e-10


def design_pseudo_inverse(X: np.ndarray) -> np.ndarray:
    """(X^T X)^{-1} X^T，经 QR 分解计算一次供所有列复用"""
    X = np.asarray(X, dtype=float)
    n_rows, n_cols = X.shape
    if n_rows < n_cols:
        raise RankDeficientError(f"受试者数 N={n_rows} 少于协变量数 P={n_cols}")
    q, r = qr(X, mode="economic")
    diagonal = np.abs(np.diag(r))
    if diagonal.min() <= _RANK_TOLERANCE * max(diagonal.max(), 1.0):
        raise RankDeficientError("协变量矩阵 X 列不满秩")
    return solve_triangular(r, q.T)


def pointwise_ols(Y: np.ndarray, X: np.ndarray) -> np.ndarray:
    """逐网格点的 OLS 系数，返回 P×T"""
    Y = np.asarray(Y, dtype=float)
    if Y.shape[0] != np.asarray(X).shape[0]:
        raise DataError(f"Y 有 {Y.shape[0]} 行而 X 有 {np.asarray(X).shape[0]} 行")
    return design_pseudo_inverse(X) @ Y


def fit_fosr(
    data: FunctionalDataset, basis: BasisSystem, lambdas=None
) -> FoSRFit:
    """逐点 OLS 后平滑每个系数函数

    lambdas 给定时跳过 REML，直接使用这些平滑参数（此时平滑器对 Y 线性）。
    """
    pinv = design_pseudo_inverse(data.X)
    beta_raw = pinv @ data.Y
    design = basis.design_for(data.grid)

    beta_smooth = np.empty_like(beta_raw)
    chosen = np.empty(data.n_covariates)
    for p, row in enumerate(beta_raw):
        if lambdas is None:
            fit = smooth_fit(row, data.grid, basis)
        else:
            fit = penalized_fit(row, design, basis.penalty, float(lambdas[p]))
        beta_smooth[p] = fit.fitted
        chosen[p] = fit.lam
        logger.debug(
            "系数函数 {} 平滑: λ={:.3g}, edf={:.2f}",
            data.covariate_names[p],
            fit.lam,
            fit.edf,
        )

    return FoSRFit(
        beta_raw=beta_raw,
        beta_smooth=beta_smooth,
        residuals=data.Y - data.X @ beta_smooth,
        design_pinv=pinv,
        lambdas=chosen,
    )
