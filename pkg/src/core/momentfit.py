"""
得分矩回归
方差用对数连接 quasi-Poisson IRLS，相关矩阵取缩放得分的经验相关，
三阶/四阶交叉矩按有序下标元组批量回归
"""

from __future__ import annotations

import warnings
from collections import Counter
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
import statsmodels.api as sm
from loguru import logger
from scipy.linalg import eigh
from statsmodels.tools.sm_exceptions import ConvergenceWarning, PerfectSeparationWarning

from .errors import DataError, NumericError
from .fosr import design_pseudo_inverse
from .models import (
    CorrelationModel,
    FourthMomentModel,
    ThirdMomentModel,
    VarianceModel,
)

MAX_IRLS_ITERATIONS = 100
IRLS_TOLERANCE = 1e-8
PRODUCT_LIMIT = 1e12
# 每块乘积响应矩阵的元素上限，避免 J=24 时一次性展开所有四元组
_BLOCK_ELEMENTS = 4_000_000

# 零偏差的精确拟合会触发完全分离警告；收敛由 result.converged 判断。
# 在导入时设置一次，IRLS 在线程池中运行时不再改动全局过滤器
warnings.filterwarnings("ignore", category=PerfectSeparationWarning)
warnings.filterwarnings("ignore", category=ConvergenceWarning)


def fit_variance_glm(response, X: np.ndarray) -> np.ndarray:
    """对数连接 quasi-Poisson GLM 的 IRLS 点估计，返回 P 向量"""
    response = np.asarray(response, dtype=float)
    if np.any(response < 0):
        raise DataError("quasi-Poisson 响应必须非负")
    if not np.any(response > 0):
        raise NumericError("quasi-Poisson 响应全部为零，对数连接无解")

    model = sm.GLM(response, np.asarray(X, dtype=float), family=sm.families.Poisson())
    result = model.fit(
        maxiter=MAX_IRLS_ITERATIONS,
        tol=IRLS_TOLERANCE,
        tol_criterion="params",
        scale="X2",
    )
    if not result.converged:
        raise NumericError(f"IRLS 在 {MAX_IRLS_ITERATIONS} 次迭代内未收敛")
    params = np.asarray(result.params, dtype=float)
    if not np.all(np.isfinite(params)):
        raise NumericError("IRLS 得到非有限系数")
    logger.trace("IRLS 收敛，迭代 {} 次", result.fit_history["iteration"])
    return params


def fit_variance_model(xi: np.ndarray, X: np.ndarray) -> VarianceModel:
    """逐基函数回归 ξ_ij² ~ exp(X_i^T γ_j)"""
    gamma = np.column_stack(
        [fit_variance_glm(xi[:, j] ** 2, X) for j in range(xi.shape[1])]
    )
    return VarianceModel(gamma=gamma)


def _correlation(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean(axis=0)
    sd = np.sqrt(np.mean(centered**2, axis=0))
    degenerate = sd <= 0
    if np.any(degenerate):
        logger.warning("{} 个缩放得分列方差为零，相关系数按 0 处理", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, sd)
    z = centered / safe
    corr = z.T @ z / len(values)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.fill_diagonal(corr, 1.0)
    return (corr + corr.T) / 2.0


def scale_and_correlate(xi: np.ndarray, X: np.ndarray, variance: VarianceModel):
    """ξ*_ij = ξ_ij exp(-X_i^T γ_j / 2)，C 为 ξ* 各列的经验相关矩阵"""
    xi_star = xi * np.exp(-(X @ variance.gamma) / 2.0)
    return xi_star, _correlation(xi_star)


def _standardize(values: np.ndarray) -> np.ndarray:
    centered = values - values.mean(axis=0)
    sd = np.sqrt(np.mean(centered**2, axis=0))
    return centered / np.where(sd > 0, sd, 1.0)


def fit_correlation_eigenmodel(
    xi_star: np.ndarray, X: np.ndarray, C: np.ndarray | None = None
) -> CorrelationModel:
    """C(X) = Σ_j exp(X^T θ_j) U_j U_j^T，U_j 为 C 的特征向量

    投影使用标准化后的缩放得分，使仅含截距时 C(X) 精确还原 C。
    """
    if C is None:
        C = _correlation(xi_star)
    if xi_star.shape[0] <= np.asarray(X).shape[1]:
        raise DataError("特征值模型要求受试者数多于协变量数")
    _, eigenvectors = eigh(C)
    projections = _standardize(xi_star) @ eigenvectors
    coefficients = np.column_stack(
        [fit_variance_glm(projections[:, j] ** 2, X) for j in range(C.shape[0])]
    )
    return CorrelationModel(
        C=C, eigenvectors=eigenvectors, eigen_coefficients=coefficients
    )


def normalize_scores(
    xi_star: np.ndarray, X: np.ndarray, correlation: CorrelationModel
) -> np.ndarray:
    """ξ̃_i = C(X_i)^{-1/2} ξ*_i；高斯得分下协方差为单位阵"""
    if correlation.has_eigenmodel:
        U = correlation.eigenvectors
        damp = np.exp(-(X @ correlation.eigen_coefficients) / 2.0)
        return ((xi_star @ U) * damp) @ U.T

    eigenvalues, U = eigh(correlation.C)
    inverse_root = 1.0 / np.sqrt(np.clip(eigenvalues, 1e-12, None))
    return xi_star @ (U * inverse_root) @ U.T


def sorted_tuples(n_basis: int, order: int) -> np.ndarray:
    """所有 j1 <= j2 <= ... 的下标元组，共 C(J+order-1, order) 个"""
    return np.array(
        list(combinations_with_replacement(range(n_basis), order)), dtype=int
    ).reshape(-1, order)


def multiplicity_weights(tuples: np.ndarray) -> np.ndarray:
    """有序求和中每个有序元组出现的次数：order! / Π count!"""
    order = tuples.shape[1]
    weights = []
    for row in tuples:
        denominator = 1
        for count in Counter(row.tolist()).values():
            denominator *= factorial(count)
        weights.append(factorial(order) // denominator)
    return np.array(weights, dtype=float)


def even_multiplicity(tuples: np.ndarray) -> np.ndarray:
    """每个下标都出现偶数次的元组（模式 (4) 与 (2,2)）"""
    return np.array(
        [all(c % 2 == 0 for c in Counter(row.tolist()).values()) for row in tuples],
        dtype=bool,
    )


def _product_blocks(xi_star: np.ndarray, tuples: np.ndarray):
    n_rows, order = xi_star.shape[0], tuples.shape[1]
    block = max(1, _BLOCK_ELEMENTS // max(n_rows * order, 1))
    for start in range(0, len(tuples), block):
        chunk = tuples[start : start + block]
        products = np.prod(xi_star[:, chunk], axis=2)
        if np.any(np.abs(products) > PRODUCT_LIMIT):
            bad = chunk[np.argmax(np.abs(products).max(axis=0))]
            raise DataError(
                f"得分乘积 {tuple(int(j) for j in bad)} 的绝对值超过 {PRODUCT_LIMIT:.0e}，"
                "请检查数据"
            )
        yield start, products


def _batched_ols(xi_star: np.ndarray, tuples: np.ndarray, pinv: np.ndarray) -> np.ndarray:
    coefficients = np.empty((len(tuples), pinv.shape[0]))
    for start, products in _product_blocks(xi_star, tuples):
        coefficients[start : start + products.shape[1]] = (pinv @ products).T
    return coefficients


def fit_third_moments(xi_star: np.ndarray, X: np.ndarray) -> ThirdMomentModel:
    """E(ξ*_j1 ξ*_j2 ξ*_j3 | X) = X^T δ，所有三元组共用一个投影矩阵"""
    pinv = design_pseudo_inverse(X)
    tuples = sorted_tuples(xi_star.shape[1], 3)
    delta = _batched_ols(xi_star, tuples, pinv)
    logger.debug("三阶矩回归完成: {} 个三元组", len(tuples))
    return ThirdMomentModel(
        tuples=tuples, delta=delta, weights=multiplicity_weights(tuples)
    )


def fit_fourth_moments(xi_star: np.ndarray, X: np.ndarray) -> FourthMomentModel:
    """偶数重数四元组用对数连接 quasi-Poisson，其余用 OLS"""
    pinv = design_pseudo_inverse(X)
    tuples = sorted_tuples(xi_star.shape[1], 4)
    log_link = even_multiplicity(tuples)

    eta = np.empty((len(tuples), pinv.shape[0]))
    eta[~log_link] = _batched_ols(xi_star, tuples[~log_link], pinv)
    for row in np.flatnonzero(log_link):
        response = np.prod(xi_star[:, tuples[row]], axis=1)
        if np.any(np.abs(response) > PRODUCT_LIMIT):
            raise DataError(
                f"得分乘积 {tuple(int(j) for j in tuples[row])} 的绝对值超过 "
                f"{PRODUCT_LIMIT:.0e}，请检查数据"
            )
        eta[row] = fit_variance_glm(response, X)

    logger.debug(
        "四阶矩回归完成: {} 个四元组，其中 {} 个对数连接",
        len(tuples),
        int(log_link.sum()),
    )
    return FourthMomentModel(
        tuples=tuples,
        eta=eta,
        log_link=log_link,
        weights=multiplicity_weights(tuples),
    )
