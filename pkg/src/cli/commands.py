"""
子命令实现：simulate / fit / curves / bands / coverage / summarize
每个命令读取 RunConfig，把结果写入 config.out，返回写出的文件列表
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from src.core.artifacts import ArtifactManager
from src.core.bands import all_bands, bootstrap_pipeline
from src.core.basis import build_cyclic_basis
from src.core.dataset_io import load_dataset, read_numeric_csv, save_dataset, write_csv
from src.core.errors import ConfigError, DataError
from src.core.models import BandKind, CurveKind
from src.core.momentfit import normalize_scores, scale_and_correlate
from src.core.sim import CoverageCell, DGPSpec, generate_dataset, run_coverage_experiment
from src.core.surface import MomentModel, conditional_curve, empirical_moment_curves, fit_moment_model
from src.core.targets import TargetSpec, format_vector

from .run_config import RunConfig

BAND_COLUMNS = {
    BandKind.WALD: ("wald_lo", "wald_hi"),
    BandKind.CMA_SYMMETRIC: ("cma_lo", "cma_hi"),
    BandKind.CMA_ASYMMETRIC: ("acma_lo", "acma_hi"),
}
CURVE_KINDS = (
    CurveKind.MEAN,
    CurveKind.VARIANCE,
    CurveKind.SD,
    CurveKind.SKEWNESS,
    CurveKind.EXCESS_KURTOSIS,
)


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"无法创建输出目录 {out}: {exc}") from None
    return out


def _dgp_spec(config: RunConfig, n_subjects: int | None = None, n_points: int | None = None):
    return DGPSpec(
        n_subjects=n_subjects or config.N,
        n_points=n_points or config.K,
        seed=config.seed,
        include_scores=config.include_scores,
        include_noise=config.include_noise,
        gaussian_scores=config.gaussian_scores,
        truth_draws=config.truth_draws,
        truth_seed=config.truth_seed,
    )


def cmd_simulate(config: RunConfig) -> List[Path]:
    """写出 Y.csv、X.csv、grid.csv 与 truth.json"""
    out = _output_dir(config)
    spec = _dgp_spec(config)
    simulated = generate_dataset(spec)
    paths = save_dataset(simulated.data, out)

    truth_path = out / "truth.json"
    with open(truth_path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2, ensure_ascii=False)
    logger.info("模拟数据已写入 {} (N={}, K={})", out, spec.n_subjects, spec.n_points)
    return [*paths, truth_path]


def _load_input(config: RunConfig):
    return load_dataset(config.y, config.x, config.grid, config.transform, config.center)


def cmd_fit(config: RunConfig) -> List[Path]:
    out = _output_dir(config)
    data, centering = _load_input(config)
    basis = build_cyclic_basis(config.degree, tuple(config.boundary), config.n_knots, data.grid)
    model = fit_moment_model(data, basis, eigenmodel=config.eigenmodel)
    xi_star, _ = scale_and_correlate(model.scores.xi, data.X, model.variance)
    normalized = normalize_scores(xi_star, data.X, model.correlation)

    manager = ArtifactManager()
    manifest = manager.save_model(
        model,
        out,
        config_hash=config.config_hash(),
        seed=config.seed,
        data_files={
            "y": str(Path(config.y).resolve()),
            "x": str(Path(config.x).resolve()),
            "grid": str(Path(config.grid).resolve()),
        },
        extra={
            "transform": config.transform,
            "center": list(config.center),
            "centering": centering,
            "eigenmodel": config.eigenmodel,
        },
        diagnostics={
            "normalized_scores.csv": pd.DataFrame(
                normalized, columns=[f"phi{j + 1}" for j in range(basis.n_basis)]
            )
        },
    )
    logger.info("拟合完成: N={}, T={}, J={}", data.n_subjects, data.n_points, basis.n_basis)
    return sorted(out.glob("*.csv")) + [manifest]


def _probe_pairs(config: RunConfig):
    if not config.probes:
        raise ConfigError("没有配置协变量探针 probes")
    return config.probes


def to_model_scale(vector, names: Sequence[str], centering: Dict[str, float]) -> np.ndarray:
    """原始尺度的协变量向量减去拟合时记录的中心化均值"""
    shifted = np.array(vector, dtype=float)
    if len(shifted) != len(names):
        raise DataError(f"协变量向量长度 {len(shifted)} 与模型的 {len(names)} 个协变量不一致")
    for name, mean in centering.items():
        shifted[list(names).index(name)] -= mean
    return shifted


def _center_target(spec: TargetSpec, model: MomentModel, centering: Dict[str, float]) -> TargetSpec:
    if not centering:
        return spec
    changes = {
        key: tuple(to_model_scale(value, model.covariate_names, centering))
        for key in ("covariate", "covariate2")
        if (value := getattr(spec, key)) is not None
    }
    return replace(spec, **changes)


def cmd_curves(config: RunConfig) -> List[Path]:
    """在每个探针处求值条件矩曲线与滞后相关，写出 curves.csv

    探针按原始尺度书写，中心化过的协变量先减去清单中记录的均值。
    """
    out = _output_dir(config)
    manager = ArtifactManager()
    model = manager.load_model(config.fit_dir)
    centering = manager.load_manifest(config.fit_dir).get("centering", {})
    frames = []
    for probe in _probe_pairs(config):
        x = to_model_scale(probe, model.covariate_names, centering)
        requests = [(kind, None) for kind in CURVE_KINDS]
        requests += [(CurveKind.CORRELATION, lag) for lag in config.lags]
        for kind, lag in requests:
            curve = conditional_curve(model, x, kind, lag=lag)
            frames.append(
                pd.DataFrame(
                    {
                        "probe": format_vector(probe),
                        "kind": kind.value,
                        "lag": np.nan if lag is None else lag,
                        "s": model.grid,
                        "value": curve.values,
                    }
                )
            )
    path = out / "curves.csv"
    write_csv(pd.concat(frames, ignore_index=True), path)
    return [path]


def resolve_target(text: str, config: RunConfig) -> TargetSpec:
    """目标只写类型名时，用 probes（和 lags）补全协变量向量"""
    text = text.strip()
    if ":" in text or text == "sigma2_eps":
        return TargetSpec.parse(text)
    probes = _probe_pairs(config)
    first = format_vector(probes[0])
    if text == CurveKind.VARIANCE_RATIO.value:
        if len(probes) < 2:
            raise ConfigError("方差比目标需要两个协变量探针")
        return TargetSpec.parse(f"{text}:{first};{format_vector(probes[1])}")
    if text == CurveKind.CORRELATION.value:
        if not config.lags:
            raise ConfigError("滞后相关目标需要配置 lags")
        return TargetSpec.parse(f"{text}:{first}@{config.lags[0]:g}")
    return TargetSpec.parse(f"{text}:{first}")


def cmd_bands(config: RunConfig, target: str) -> List[Path]:
    """对拟合结果中的一个目标曲线做自助法，写出 bands.csv 与各带乘子 bands.json"""
    config.validate()
    out = _output_dir(config)
    manager = ArtifactManager()
    manifest = manager.load_manifest(config.fit_dir)
    files = manifest.get("data_files", {})
    missing = [key for key in ("y", "x", "grid") if not files.get(key) or not Path(files[key]).is_file()]
    if missing:
        raise DataError(f"拟合清单中的原始数据文件不可用: {', '.join(missing)}")

    model = manager.load_model(config.fit_dir)
    data, _ = load_dataset(
        files["y"],
        files["x"],
        files["grid"],
        manifest.get("transform", "none"),
        manifest.get("center", []),
    )
    spec = _center_target(resolve_target(target, config), model, manifest.get("centering", {}))
    estimate = spec.evaluate(model)
    ensembles = bootstrap_pipeline(
        data,
        model.basis,
        config.B,
        config.seed,
        [spec],
        threads=config.threads,
        eigenmodel=bool(manifest.get("eigenmodel", False)),
    )
    bands = all_bands(ensembles[spec.label], estimate, config.alpha, config.band_kinds())

    columns = {"s": model.grid, "estimate": estimate}
    for kind, band in bands.items():
        lo, hi = BAND_COLUMNS[kind]
        columns[lo] = band.lower
        columns[hi] = band.upper
        logger.info("{}: q_lo={:.4f}, q_hi={:.4f}", kind.value, band.q_lo, band.q_hi)
    path = out / "bands.csv"
    write_csv(pd.DataFrame(columns), path)

    summary_path = out / "bands.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump([band.to_dict() for band in bands.values()], f, indent=2, ensure_ascii=False)
    return [path, summary_path]


def cmd_coverage(config: RunConfig) -> List[Path]:
    config.validate()
    out = _output_dir(config)
    targets = [TargetSpec.parse(text) for text in config.targets]
    cells = [CoverageCell(n, k) for n, k in config.coverage_cells()]
    report = run_coverage_experiment(
        _dgp_spec(config),
        config.replicates,
        config.B,
        targets,
        cells=cells,
        alpha=config.alpha,
        threads=config.threads,
        degree=config.degree,
        n_knots=config.n_knots,
        kinds=config.band_kinds(),
    )

    coverage_path, ise_path = out / "coverage.csv", out / "ise.csv"
    write_csv(report.coverage, coverage_path)
    write_csv(report.ise, ise_path)
    paths = [coverage_path, ise_path]
    if report.failures:
        failures_path = out / "failures.csv"
        write_csv(pd.DataFrame(report.failures), failures_path)
        paths.append(failures_path)
        logger.warning("{} 次重复失败，详见 {}", len(report.failures), failures_path)
    return paths


def cmd_summarize(config: RunConfig) -> List[Path]:
    """按分组写出平滑后的逐点样本均值、标准差、偏度、超额峰度"""
    out = _output_dir(config)
    data, _ = _load_input(config)
    groups = None
    if config.groups:
        frame = read_numeric_csv(config.x)
        if config.groups not in frame.columns:
            raise DataError(f"分组列 {config.groups!r} 不在 X.csv 中")
        groups = frame[config.groups].map(lambda v: f"{v:g}").to_numpy()
    basis = build_cyclic_basis(config.degree, tuple(config.boundary), config.n_knots, data.grid)
    curves = empirical_moment_curves(data.Y, basis, groups)

    frame = pd.concat(
        [
            pd.DataFrame({"group": label, "s": data.grid, **moments})
            for label, moments in curves.items()
        ],
        ignore_index=True,
    )
    path = out / "moments.csv"
    write_csv(frame, path)
    return [path]
