"""
数据模型定义
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import DataError


class CurveKind(Enum):
    """条件曲线类型"""

    MEAN = "mean"
    VARIANCE = "variance"
    SD = "sd"
    CORRELATION = "correlation"  # 滞后相关
    SKEWNESS = "skewness"
    EXCESS_KURTOSIS = "excess_kurtosis"
    VARIANCE_RATIO = "variance_ratio"


class BandKind(Enum):
    """置信带类型"""

    WALD = "wald"
    CMA_SYMMETRIC = "cma_symmetric"
    CMA_ASYMMETRIC = "cma_asymmetric"


class FourthBranch(Enum):
    """四阶矩回归分支"""

    LOG_LINK = "log-link"  # 所有下标出现偶数次
    LINEAR = "linear"


@dataclass
class FunctionalDataset:
    """函数型数据：N×T 响应矩阵、T 点网格、N×P 协变量矩阵"""

    Y: np.ndarray
    grid: np.ndarray
    X: np.ndarray
    covariate_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.grid = np.asarray(self.grid, dtype=float).ravel()
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]

        n_rows, n_points = self.Y.shape
        if self.X.shape[0] != n_rows:
            raise DataError(
                f"Y 有 {n_rows} 行而 X 有 {self.X.shape[0]} 行，行数必须一致"
            )
        if len(self.grid) != n_points:
            raise DataError(
                f"网格长度 {len(self.grid)} 与 Y 的列数 {n_points} 不一致"
            )
        if not self.covariate_names:
            self.covariate_names = [f"x{p + 1}" for p in range(self.X.shape[1])]
        if len(self.covariate_names) != self.X.shape[1]:
            raise DataError(
                f"协变量名 {len(self.covariate_names)} 个，X 有 {self.X.shape[1]} 列"
            )

    @property
    def n_subjects(self) -> int:
        return self.Y.shape[0]

    @property
    def n_points(self) -> int:
        return self.Y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    def resample(self, rows: np.ndarray) -> "FunctionalDataset":
        """按受试者行（Y 与 X 同步）重新抽取"""
        return FunctionalDataset(
            Y=self.Y[rows],
            grid=self.grid,
            X=self.X[rows],
            covariate_names=list(self.covariate_names),
        )


@dataclass
class PenalizedFit:
    """惩罚最小二乘拟合结果"""

    coefficients: np.ndarray
    lam: float
    edf: float
    fitted: np.ndarray
    ridge_fallback: bool = False


@dataclass
class FoSRFit:
    """函数对标量回归结果"""

    beta_raw: np.ndarray  # P×T 逐点 OLS 系数
    beta_smooth: np.ndarray  # P×T 平滑后的系数函数
    residuals: np.ndarray  # N×T
    design_pinv: np.ndarray  # P×N
    lambdas: Optional[np.ndarray] = None


@dataclass
class ScoreSet:
    """基函数得分与噪声方差"""

    xi: np.ndarray  # N×J
    lambda_scores: float
    noise: np.ndarray  # N×T
    sigma2_eps: np.ndarray  # T


@dataclass
class VarianceModel:
    """对数线性得分方差 Var(ξ_ij | X_i) = exp(X_i^T γ_j)"""

    gamma: np.ndarray  # P×J

    def log_variance(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.gamma

    def scale(self, x) -> np.ndarray:
        """exp(x^T γ_j / 2)，逐基函数的条件标准差"""
        return np.exp(self.log_variance(x) / 2.0)


@dataclass
class CorrelationModel:
    """缩放得分的相关矩阵，可选协变量依赖的特征值模型"""

    C: np.ndarray
    eigenvectors: Optional[np.ndarray] = None  # J×J，列为 U_j
    eigen_coefficients: Optional[np.ndarray] = None  # P×J

    @property
    def has_eigenmodel(self) -> bool:
        return self.eigenvectors is not None and self.eigen_coefficients is not None

    def at(self, x) -> np.ndarray:
        """协变量 x 处的相关矩阵 C(x)"""
        if not self.has_eigenmodel:
            return self.C
        weights = np.exp(np.asarray(x, dtype=float) @ self.eigen_coefficients)
        return (self.eigenvectors * weights) @ self.eigenvectors.T


@dataclass
class ThirdMomentModel:
    """E(ξ*_j1 ξ*_j2 ξ*_j3 | X) = X^T δ，按有序三元组 j1<=j2<=j3 存储"""

    tuples: np.ndarray  # M×3
    delta: np.ndarray  # M×P
    weights: np.ndarray  # 展开为有序求和时的多项式重数

    def expected_products(self, x) -> np.ndarray:
        return self.delta @ np.asarray(x, dtype=float)


@dataclass
class FourthMomentModel:
    """四阶交叉矩回归；偶数重数模式取对数连接，其余线性"""

    tuples: np.ndarray  # M×4
    eta: np.ndarray  # M×P
    log_link: np.ndarray  # M 布尔
    weights: np.ndarray

    def expected_products(self, x) -> np.ndarray:
        linear = self.eta @ np.asarray(x, dtype=float)
        return np.where(self.log_link, np.exp(linear), linear)


@dataclass
class ConditionalCurve:
    """在单个协变量向量处求值的矩曲线"""

    covariate: np.ndarray
    kind: CurveKind
    values: np.ndarray
    lag: Optional[float] = None
    covariate2: Optional[np.ndarray] = None


@dataclass
class BootstrapEnsemble:
    """某个目标曲线的 B×T 自助重拟合样本"""

    target: str
    samples: np.ndarray
    seed: int
    mean: np.ndarray = field(init=False)
    sd: np.ndarray = field(init=False)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 2:
            raise DataError("自助样本数 B 必须 >= 2")
        self.mean = self.samples.mean(axis=0)
        # d = (1/B) Σ (g*_b - ḡ)^2，以样本均值为中心
        self.sd = np.sqrt(((self.samples - self.mean) ** 2).mean(axis=0))

    @property
    def n_replicates(self) -> int:
        return self.samples.shape[0]


@dataclass
class BandResult:
    """置信带"""

    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kind: BandKind
    alpha: float
    q_lo: float
    q_hi: float
    collapsed: np.ndarray  # 逐点标准差为零、带宽退化的位置

    @property
    def flagged(self) -> bool:
        return bool(np.any(self.collapsed))

    def covers(self, truth: np.ndarray) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.lower <= truth) & (truth <= self.upper)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "alpha": self.alpha,
            "q_lo": self.q_lo,
            "q_hi": self.q_hi,
            "collapsed_points": int(np.sum(self.collapsed)),
        }
