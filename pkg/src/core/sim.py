"""
模拟数据生成与覆盖率实验
固定效应、噪声方差、Gaussian copula + Gamma 分位数变换的非高斯得分，
以及 ISE / 置信带覆盖率的重复实验
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy.integrate import trapezoid
from scipy.linalg import cholesky
from scipy.stats import gamma as gamma_dist
from scipy.stats import norm

from .bands import all_bands, bootstrap_pipeline
from .basis import BasisSystem, build_cyclic_basis
from .errors import ConfigError, DataError, MomentRegressionError
from .models import (
    BandKind,
    CorrelationModel,
    FoSRFit,
    FourthMomentModel,
    FunctionalDataset,
    ThirdMomentModel,
    VarianceModel,
)
from .momentfit import even_multiplicity, multiplicity_weights, sorted_tuples
from .surface import MomentModel, fit_moment_model
from .targets import TargetSpec, deepest_stage

MINUTES_PER_DAY = 1440
TRUTH_DRAWS = 1_000_000
TRUTH_SEED = 20_240_611

# Gaussian copula 的相关矩阵
SCORE_COPULA = np.array(
    [
        [1.0, -0.4, 0.7, -0.4, -0.2],
        [-0.4, 1.0, -0.4, 0.5, -0.1],
        [0.7, -0.4, 1.0, -0.5, 0.1],
        [-0.4, 0.5, -0.5, 1.0, -0.5],
        [-0.2, -0.1, 0.1, -0.5, 1.0],
    ]
)

# (符号, Gamma 形状)；None 表示保持高斯
SCORE_MARGINALS: Tuple[Tuple[int, Optional[float]], ...] = (
    (-1, 3.0),
    (1, 50.0),
    (-1, 20.0),
    (1, None),
    (1, 4.0),
)

# 行为基函数 j，列为 (b_0j, b_1j, b_2j, b_3j)
SCORE_LOADINGS = np.array(
    [
        [-0.2, -0.009, -0.04, -0.07],
        [-0.01, -0.05, -0.1, -0.06],
        [-0.03, 0.2, 0.1, -0.005],
        [0.01, -0.8, -0.006, -0.2],
        [-1.0, -0.003, 0.02, -0.02],
    ]
)

COVARIATE_NAMES = ["x1", "x2", "x3", "x4"]
DGP_DEGREE = 3
DGP_KNOTS = 5


def _unit_interval(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise DataError("固定效应与噪声方差函数只在 [0, 1] 上定义")
    return s


def _bump(s, shift, width):
    return 1.0 - np.cos((s - shift) * np.pi / width)


def true_fixed_effects(s) -> np.ndarray:
    """(β_0, β_1, β_2, β_3)(s)；s 为标量时返回 4 向量，为向量时返回 4×T"""
    s = _unit_interval(s)
    beta0 = 2.5 - 1.8 * np.exp(-2.0 * (1.0 - np.cos((2.0 * s - 5.0 / 18.0) * np.pi)))
    beta1 = np.where(
        s >= 1.0 / 3.0,
        0.005 - 0.01 * (1.0 - np.cos((3.0 * s - 1.0) * np.pi / 2.0)),
        0.005 - 0.01 * (1.0 - np.cos((3.0 * s - 1.0) * np.pi)),
    )
    beta2 = np.select(
        [s < 5.0 / 24.0, s < 5.0 / 12.0, s < 5.0 / 6.0],
        [
            0.1 - 0.125 * _bump(s, -1.0 / 6.0, 3.0 / 8.0),
            0.1 - 0.125 * _bump(s, 5.0 / 12.0, 5.0 / 24.0),
            np.full_like(s, 0.1),
        ],
        default=0.1 - 0.125 * _bump(s, 5.0 / 6.0, 29.0 / 24.0),
    )
    beta3 = np.select(
        [s < 1.0 / 8.0, s < 7.0 / 24.0],
        [
            0.02 - 0.125 * _bump(s, 1.0 / 8.0, 5.0 / 6.0),
            0.02 - 0.125 * _bump(s, 1.0 / 8.0, 1.0 / 6.0),
        ],
        default=-0.23 + 0.125 * _bump(s, 7.0 / 24.0, 5.0 / 6.0),
    )
    return np.stack([beta0, beta1, beta2, beta3])


def true_noise_variance(s) -> np.ndarray:
    s = _unit_interval(s)
    return (
        0.1
        + 0.35 * np.exp(-4.0 * (1.0 - np.cos((2.0 * s - 0.5) * np.pi)))
        + 0.25 * np.exp(-4.0 * (1.0 - np.cos(2.0 * s * np.pi)))
    )


def standardized_scores(latent: np.ndarray, gaussian: bool = False) -> np.ndarray:
    """把 N(0, Σ₀) 潜变量变换为均值 0、方差 1 的偏态得分 ξ*"""
    latent = np.atleast_2d(latent)
    if gaussian:
        return latent.copy()
    out = np.empty_like(latent)
    for j, (sign, shape) in enumerate(SCORE_MARGINALS):
        if shape is None:
            out[:, j] = latent[:, j]
            continue
        # F^{-1}(Φ(sign·γ); shape)，用生存函数保持上尾精度
        quantile = gamma_dist.isf(norm.sf(sign * latent[:, j]), shape)
        out[:, j] = sign * (quantile - shape) / np.sqrt(shape)
    return out


def score_log_variance(covariates: np.ndarray) -> np.ndarray:
    """b_0j + Σ_i b_ij x_i，covariates 为 N×3（不含截距）"""
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if covariates.shape[1] != 3:
        raise DataError(f"得分生成需要 3 个非截距协变量，当前为 {covariates.shape[1]}")
    return SCORE_LOADINGS[:, 0] + covariates @ SCORE_LOADINGS[:, 1:].T


def draw_scores(covariates: np.ndarray, rng: np.random.Generator, gaussian: bool = False):
    """N 个受试者的得分（N×5），covariates 为 N×3"""
    chol = cholesky(SCORE_COPULA, lower=True)
    latent = rng.standard_normal((len(covariates), len(SCORE_COPULA))) @ chol.T
    xi_star = standardized_scores(latent, gaussian)
    return xi_star * np.exp(score_log_variance(covariates) / 2.0)


def generate_scores(x, seed=None, gaussian: bool = False) -> np.ndarray:
    """单个受试者的 5 维随机效应得分；seed 可以是整数或 numpy Generator"""
    rng = np.random.default_rng(seed)
    return draw_scores(np.asarray(x, dtype=float).reshape(1, -1), rng, gaussian)[0]


@dataclass(frozen=True)
class DGPSpec:
    """模拟设定"""

    n_subjects: int = 100
    n_points: int = 144
    seed: int = 0
    include_scores: bool = True
    include_noise: bool = True
    gaussian_scores: bool = False
    truth_draws: int = TRUTH_DRAWS
    truth_seed: int = TRUTH_SEED

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError(f"受试者数必须 >= 1，当前为 {self.n_subjects}")
        if self.n_points < DGP_KNOTS:
            raise ConfigError(f"网格点数必须 >= {DGP_KNOTS}，当前为 {self.n_points}")
        if self.truth_draws < 2:
            raise ConfigError("真值蒙特卡洛抽样数必须 >= 2")

    @property
    def grid(self) -> np.ndarray:
        """s_k = k/K, k = 1..K"""
        return np.arange(1, self.n_points + 1) / self.n_points

    def to_dict(self) -> Dict:
        return {
            "n_subjects": self.n_subjects,
            "n_points": self.n_points,
            "seed": self.seed,
            "include_scores": self.include_scores,
            "include_noise": self.include_noise,
            "gaussian_scores": self.gaussian_scores,
            "truth_draws": self.truth_draws,
            "truth_seed": self.truth_seed,
            "score_copula": SCORE_COPULA.tolist(),
            "score_marginals": [list(m) for m in SCORE_MARGINALS],
            "score_loadings": SCORE_LOADINGS.tolist(),
            "basis": {"degree": DGP_DEGREE, "n_knots": DGP_KNOTS, "boundary": [0.0, 1.0]},
        }


@dataclass(frozen=True)
class _ScoreMoments:
    correlation: np.ndarray
    third: np.ndarray
    fourth: np.ndarray


@lru_cache(maxsize=8)
def _score_moments(gaussian: bool, draws: int, seed: int) -> _ScoreMoments:
    """ξ* 的相关矩阵与三阶/四阶交叉矩，按 (gaussian, draws, seed) 缓存"""
    logger.debug("计算得分真值矩: {} 次抽样, seed={}", draws, seed)
    rng = np.random.default_rng(seed)
    chol = cholesky(SCORE_COPULA, lower=True)
    latent = rng.standard_normal((draws, len(SCORE_COPULA))) @ chol.T
    xi_star = standardized_scores(latent, gaussian)
    J = xi_star.shape[1]
    third = np.array([np.mean(np.prod(xi_star[:, t], axis=1)) for t in sorted_tuples(J, 3)])
    fourth = np.array([np.mean(np.prod(xi_star[:, t], axis=1)) for t in sorted_tuples(J, 4)])
    return _ScoreMoments(
        correlation=np.corrcoef(xi_star, rowvar=False), third=third, fourth=fourth
    )


def dgp_basis(grid) -> BasisSystem:
    return build_cyclic_basis(DGP_DEGREE, (0.0, 1.0), DGP_KNOTS, np.asarray(grid, dtype=float))


def truth_model(spec: DGPSpec) -> MomentModel:
    """真实参数组成的 MomentModel，可直接交给 surface / targets 求值

    方差与均值为精确值；C 与三阶/四阶矩来自固定种子的蒙特卡洛缓存。
    """
    grid = spec.grid
    basis = dgp_basis(grid)
    beta = true_fixed_effects(grid)
    P, J = len(COVARIATE_NAMES), len(SCORE_LOADINGS)

    third_tuples = sorted_tuples(J, 3)
    fourth_tuples = sorted_tuples(J, 4)
    delta = np.zeros((len(third_tuples), P))
    eta = np.zeros((len(fourth_tuples), P))
    if spec.include_scores:
        moments = _score_moments(spec.gaussian_scores, spec.truth_draws, spec.truth_seed)
        correlation = moments.correlation
        log_link = even_multiplicity(fourth_tuples)
        delta[:, 0] = moments.third
        eta[:, 0] = np.where(log_link, np.log(np.where(log_link, moments.fourth, 1.0)), moments.fourth)
    else:
        correlation = np.zeros((J, J))
        log_link = np.zeros(len(fourth_tuples), dtype=bool)

    sigma2 = true_noise_variance(grid) if spec.include_noise else np.zeros(len(grid))
    return MomentModel(
        basis=basis,
        fosr=FoSRFit(
            beta_raw=beta,
            beta_smooth=beta,
            residuals=np.zeros((0, len(grid))),
            design_pinv=np.zeros((P, 0)),
        ),
        covariate_names=list(COVARIATE_NAMES),
        sigma2_eps=sigma2,
        variance=VarianceModel(gamma=SCORE_LOADINGS.T.copy()),
        correlation=CorrelationModel(C=correlation),
        third=ThirdMomentModel(
            tuples=third_tuples, delta=delta, weights=multiplicity_weights(third_tuples)
        ),
        fourth=FourthMomentModel(
            tuples=fourth_tuples,
            eta=eta,
            log_link=log_link,
            weights=multiplicity_weights(fourth_tuples),
        ),
    )


@dataclass
class SimulatedData:
    data: FunctionalDataset
    scores: np.ndarray  # N×5 真实得分
    spec: DGPSpec

    @property
    def truth(self) -> MomentModel:
        return truth_model(self.spec)


def sample_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """X1=1, X2~U(-30,30), X3~Bern(0.5), X4~Bern(0.3)"""
    return np.column_stack(
        [
            np.ones(n),
            rng.uniform(-30.0, 30.0, n),
            rng.binomial(1, 0.5, n).astype(float),
            rng.binomial(1, 0.3, n).astype(float),
        ]
    )


def generate_dataset(spec: DGPSpec) -> SimulatedData:
    """Y_i(s_k) = Σ_l β_l(s_k) X_il + Σ_j ξ_ij φ_j(s_k) + ε_i(s_k)"""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    grid = spec.grid
    X = sample_covariates(spec.n_subjects, rng)
    scores = draw_scores(X[:, 1:], rng, spec.gaussian_scores)
    noise = rng.standard_normal((spec.n_subjects, len(grid))) * np.sqrt(true_noise_variance(grid))

    Y = X @ true_fixed_effects(grid)
    if spec.include_scores:
        Y = Y + scores @ dgp_basis(grid).design.T
    else:
        scores = np.zeros_like(scores)
    if spec.include_noise:
        Y = Y + noise

    data = FunctionalDataset(Y=Y, grid=grid, X=X, covariate_names=list(COVARIATE_NAMES))
    return SimulatedData(data=data, scores=scores, spec=spec)


def simulate_residuals(spec: DGPSpec, x, points: Sequence[int], draws: int, seed: int) -> np.ndarray:
    """固定协变量 x 处 Y(s) - E[Y(s)|x] 的蒙特卡洛样本，draws×len(points)"""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = np.asarray(x, dtype=float).ravel()
    points = np.asarray(points, dtype=int)
    grid = spec.grid[points]
    covariates = np.repeat(x[1:][None, :], draws, axis=0)
    residuals = np.zeros((draws, len(points)))
    if spec.include_scores:
        scores = draw_scores(covariates, rng, spec.gaussian_scores)
        residuals += scores @ dgp_basis(spec.grid).design[points].T
    if spec.include_noise:
        residuals += rng.standard_normal((draws, len(points))) * np.sqrt(true_noise_variance(grid))
    return residuals


def batch_means(statistic, samples: np.ndarray, n_batches: int = 20):
    """整体统计量及其批均值蒙特卡洛标准误"""
    estimate = statistic(samples)
    batches = np.array([statistic(chunk) for chunk in np.array_split(samples, n_batches)])
    return estimate, batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def ise(fhat, ftrue, grid, period: float | None = None) -> float:
    """∫ (f̂ - f)² ds，梯形法；给定 period 时补上回到周期起点的闭合区间"""
    fhat = np.asarray(fhat, dtype=float)
    ftrue = np.asarray(ftrue, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if not (fhat.shape == ftrue.shape == grid.shape):
        raise DataError(
            f"ISE 输入长度不一致: 估计 {fhat.shape}, 真值 {ftrue.shape}, 网格 {grid.shape}"
        )
    squared = (fhat - ftrue) ** 2
    if period is not None:
        squared = np.append(squared, squared[0])
        grid = np.append(grid, grid[0] + period)
    return float(trapezoid(squared, grid))


@dataclass(frozen=True)
class CoverageCell:
    n_subjects: int
    n_points: int

    @property
    def frequency(self) -> float:
        """采样间隔（分钟），K=1440/480/144 对应 1/3/10 分钟"""
        return MINUTES_PER_DAY / self.n_points


@dataclass
class ExperimentReport:
    coverage: pd.DataFrame
    ise: pd.DataFrame
    n_replicates: int
    failures: List[Dict] = field(default_factory=list)
    elapsed: float = 0.0


def _coverage_replicate(
    spec: DGPSpec,
    cell_index: int,
    cell: CoverageCell,
    replicate: int,
    B: int,
    targets: Sequence[TargetSpec],
    alpha: float,
    degree: int,
    n_knots: int,
    kinds: Sequence[BandKind] | None,
):
    seed_seq = np.random.SeedSequence([spec.seed, cell_index, replicate])
    data_seed, boot_seed = (int(v) for v in seed_seq.generate_state(2))
    cell_spec = replace(spec, n_subjects=cell.n_subjects, n_points=cell.n_points, seed=data_seed)
    key = {"N": cell.n_subjects, "frequency": cell.frequency}
    try:
        simulated = generate_dataset(cell_spec)
        data = simulated.data
        truth = simulated.truth
        basis = build_cyclic_basis(degree, (0.0, 1.0), n_knots, data.grid)
        model = fit_moment_model(data, basis, stage=deepest_stage(targets))
        ensembles = bootstrap_pipeline(data, basis, B, boot_seed, targets, threads=1)
    except MomentRegressionError as exc:
        logger.warning("单元 {} 第 {} 次重复失败: {}", cell, replicate, exc)
        return [], [], {**key, "replicate": replicate, "error": str(exc)}

    coverage_rows, ise_rows = [], []
    for target in targets:
        estimate = target.evaluate(model)
        true_curve = target.evaluate(truth)
        label = {"parameter": target.parameter, "probe": target.probe, **key}
        ise_rows.append(
            {"replicate": replicate, **label, "ise": ise(estimate, true_curve, data.grid, 1.0)}
        )
        for kind, band in all_bands(ensembles[target.label], estimate, alpha, kinds).items():
            covered = band.covers(true_curve)
            # Wald 取逐点平均覆盖率，CMA 取全域同时覆盖
            value = float(covered.mean()) if kind == BandKind.WALD else float(covered.all())
            coverage_rows.append({"method": kind.value, **label, "coverage": value})
    return coverage_rows, ise_rows, None


def run_coverage_experiment(
    spec: DGPSpec,
    replicates: int,
    B: int,
    targets: Sequence[TargetSpec],
    cells: Sequence[CoverageCell] | None = None,
    alpha: float = 0.05,
    threads: int = 1,
    degree: int = DGP_DEGREE,
    n_knots: int = DGP_KNOTS,
    kinds: Sequence[BandKind] | None = None,
) -> ExperimentReport:
    """每个 (N, K) 单元重复 replicates 次：模拟、拟合、自助、构带、对照真值

    重复之间并行，单次重复内的自助法串行，结果与线程数无关。
    失败的重复记录在 failures 中，不中断实验。
    kinds 限定构造的置信带类型，默认三种全部构造。
    """
    if replicates < 1:
        raise ConfigError(f"重复次数必须 >= 1，当前为 {replicates}")
    cells = list(cells) if cells else [CoverageCell(spec.n_subjects, spec.n_points)]
    started = time.perf_counter()
    if spec.include_scores:
        _score_moments(spec.gaussian_scores, spec.truth_draws, spec.truth_seed)

    jobs = [
        (cell_index, cell, replicate)
        for cell_index, cell in enumerate(cells)
        for replicate in range(replicates)
    ]
    outputs = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_coverage_replicate)(
            spec, cell_index, cell, replicate, B, targets, alpha, degree, n_knots, kinds
        )
        for cell_index, cell, replicate in jobs
    )

    coverage_rows = [row for rows, _, _ in outputs for row in rows]
    ise_rows = [row for _, rows, _ in outputs for row in rows]
    failures = [failure for _, _, failure in outputs if failure is not None]

    keys = ["method", "parameter", "probe", "N", "frequency"]
    if coverage_rows:
        coverage = (
            pd.DataFrame(coverage_rows).groupby(keys, sort=True)["coverage"].mean().reset_index()
        )
    else:
        coverage = pd.DataFrame(columns=[*keys, "coverage"])
    ise_frame = pd.DataFrame(
        ise_rows, columns=["replicate", "parameter", "probe", "N", "frequency", "ise"]
    )
    elapsed = time.perf_counter() - started
    logger.info(
        "覆盖率实验完成: {} 个单元 × {} 次重复，失败 {} 次，用时 {:.1f}s",
        len(cells),
        replicates,
        len(failures),
        elapsed,
    )
    return ExperimentReport(
        coverage=coverage,
        ise=ise_frame,
        n_replicates=replicates,
        failures=failures,
        elapsed=elapsed,
    )
