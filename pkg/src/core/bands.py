"""
受试者层面的非参数自助法与置信带
Wald 逐点带、对称 CMA 同时带、非对称 CMA 同时带
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy.stats import norm

from .basis import BasisSystem
from .errors import ConfigError, DataError, NumericError, RankDeficientError
from .models import BandKind, BandResult, BootstrapEnsemble, FunctionalDataset
from .surface import fit_moment_model
from .targets import TargetSpec, deepest_stage

MAX_REDRAWS = 10


def minimum_replicates(alpha: float) -> int:
    """α/2 与 1-α/2 经验分位数都有定义所需的最小 B（α=0.05 时为 40）"""
    _check_alpha(alpha)
    return math.ceil(2.0 / alpha - 1e-9)


def _check_alpha(alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha 必须在 (0, 1) 内，当前为 {alpha}")


def _replicate(
    data: FunctionalDataset,
    basis: BasisSystem,
    targets: Sequence[TargetSpec],
    seed: int,
    index: int,
    eigenmodel: bool,
) -> np.ndarray:
    stage = deepest_stage(targets)
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))
        rows = rng.integers(0, data.n_subjects, size=data.n_subjects)
        try:
            model = fit_moment_model(data.resample(rows), basis, stage, eigenmodel)
        except RankDeficientError as exc:
            logger.debug("自助样本 {} 第 {} 次抽取秩亏 ({})，重新抽取", index, attempt, exc)
            continue
        return np.stack([target.evaluate(model) for target in targets])
    raise NumericError(f"自助样本 {index} 连续 {MAX_REDRAWS} 次抽取均秩亏")


def bootstrap_pipeline(
    data: FunctionalDataset,
    basis: BasisSystem,
    B: int,
    seed: int,
    targets: Sequence[TargetSpec],
    threads: int = 1,
    eigenmodel: bool = False,
) -> Dict[str, BootstrapEnsemble]:
    """对受试者行有放回重抽样 B 次，每次重跑整条拟合流程并求值所有目标

    第 b 个样本只依赖 (seed, b)，与线程数和执行顺序无关。
    只重拟合到目标需要的最深阶段。
    """
    if B < 2:
        raise ConfigError(f"自助样本数 B 必须 >= 2，当前为 {B}")
    if not targets:
        raise ConfigError("至少需要一个自助法目标")
    if seed < 0:
        raise ConfigError(f"种子必须非负，当前为 {seed}")

    logger.debug("自助法: B={}, 线程={}, 目标={}", B, threads, [t.label for t in targets])
    results: List[np.ndarray] = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_replicate)(data, basis, targets, seed, b, eigenmodel)
        for b in range(1, B + 1)
    )
    stacked = np.stack(results)  # B × 目标数 × T
    return {
        target.label: BootstrapEnsemble(
            target=target.label, samples=stacked[:, k, :], seed=seed
        )
        for k, target in enumerate(targets)
    }


def empirical_quantile(values, prob: float) -> float:
    """逆经验分布函数（type 1）分位数"""
    return float(np.quantile(np.asarray(values, dtype=float), prob, method="inverted_cdf"))


def _prepare(ensemble: BootstrapEnsemble, estimate, alpha: float):
    _check_alpha(alpha)
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != ensemble.sd.shape:
        raise DataError(
            f"点估计长度 {estimate.shape} 与自助样本曲线长度 {ensemble.sd.shape} 不一致"
        )
    collapsed = ensemble.sd <= 0
    if collapsed.any():
        logger.warning(
            "{} 在 {} 个位置上自助标准差为零，置信带退化为点估计",
            ensemble.target,
            int(collapsed.sum()),
        )
    return estimate, collapsed


def wald_band(ensemble: BootstrapEnsemble, estimate, alpha: float = 0.05) -> BandResult:
    estimate, collapsed = _prepare(ensemble, estimate, alpha)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    half = z * ensemble.sd
    return BandResult(
        estimate=estimate,
        lower=estimate - half,
        upper=estimate + half,
        kind=BandKind.WALD,
        alpha=alpha,
        q_lo=-z,
        q_hi=z,
        collapsed=collapsed,
    )


def cma_band(
    ensemble: BootstrapEnsemble, estimate, alpha: float = 0.05, symmetric: bool = True
) -> BandResult:
    """由标准化偏差 Z*_b(s) 的最大（最小）统计量构造同时置信带

    对称带：q 为 max_s |Z*_b| 的 1-α 分位数。
    非对称带：q_hi 为 max_s Z*_b 的 1-α/2 分位数，q_lo 为 -(max_s -Z*_b 的 1-α/2 分位数)，
    带为 [估计 - q_hi·sd, 估计 - q_lo·sd]。
    右偏的集合中 Z 的下尾短，上侧带相应更窄。
    """
    estimate, collapsed = _prepare(ensemble, estimate, alpha)
    if ensemble.n_replicates < minimum_replicates(alpha):
        raise ConfigError(
            f"alpha={alpha} 的 CMA 置信带至少需要 B={minimum_replicates(alpha)}，"
            f"当前为 {ensemble.n_replicates}"
        )

    active = ~collapsed
    sd = ensemble.sd
    if active.any():
        Z = (ensemble.samples[:, active] - ensemble.mean[active]) / sd[active]
    else:
        Z = np.zeros((ensemble.n_replicates, 1))

    if symmetric:
        q = empirical_quantile(np.abs(Z).max(axis=1), 1.0 - alpha)
        q_lo, q_hi = -q, q
        kind = BandKind.CMA_SYMMETRIC
    else:
        q_hi = empirical_quantile(Z.max(axis=1), 1.0 - alpha / 2.0)
        q_lo = -empirical_quantile(-Z.min(axis=1), 1.0 - alpha / 2.0)
        kind = BandKind.CMA_ASYMMETRIC

    return BandResult(
        estimate=estimate,
        lower=estimate - q_hi * sd,
        upper=estimate - q_lo * sd,
        kind=kind,
        alpha=alpha,
        q_lo=float(q_lo),
        q_hi=float(q_hi),
        collapsed=collapsed,
    )


def all_bands(
    ensemble: BootstrapEnsemble,
    estimate,
    alpha: float = 0.05,
    kinds: Sequence[BandKind] | None = None,
) -> Dict[BandKind, BandResult]:
    """按 BandKind 的声明顺序构造所请求的置信带，默认三种全部构造"""
    builders = {
        BandKind.WALD: lambda: wald_band(ensemble, estimate, alpha),
        BandKind.CMA_SYMMETRIC: lambda: cma_band(ensemble, estimate, alpha, symmetric=True),
        BandKind.CMA_ASYMMETRIC: lambda: cma_band(ensemble, estimate, alpha, symmetric=False),
    }
    wanted = set(BandKind) if kinds is None else {BandKind(kind) for kind in kinds}
    if not wanted:
        raise ConfigError("至少需要一种置信带")
    return {kind: build() for kind, build in builders.items() if kind in wanted}
