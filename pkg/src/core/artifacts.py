"""
拟合结果文件管理器
把 MomentModel 保存为 CSV + fit-manifest.json，并能重新加载
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from loguru import logger

from .basis import build_cyclic_basis
from .dataset_io import write_csv
from .errors import DataError
from .models import (
    CorrelationModel,
    FoSRFit,
    FourthBranch,
    FourthMomentModel,
    ThirdMomentModel,
    VarianceModel,
)
from .momentfit import multiplicity_weights
from .surface import FitStage, MomentModel

MANIFEST_NAME = "fit-manifest.json"
MANIFEST_VERSION = "1.0.0"


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactManager:
    """拟合结果目录管理器"""

    def __init__(self):
        self.current_dir: Path | None = None

    def save_model(
        self,
        model: MomentModel,
        directory,
        config_hash: str = "",
        seed: Optional[int] = None,
        data_files: Optional[Dict[str, str]] = None,
        extra: Optional[Dict[str, Any]] = None,
        diagnostics: Optional[Dict[str, pd.DataFrame]] = None,
    ) -> Path:
        """按固定顺序写出各组件文件，最后写 manifest（含校验和）

        diagnostics 为附加的诊断表，同样记录校验和，加载模型时不读取。
        """
        model.require(FitStage.MOMENTS)
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = model.covariate_names
        labels = [f"phi{j + 1}" for j in range(model.basis.n_basis)]

        frames: Dict[str, pd.DataFrame] = {
            "beta.csv": pd.DataFrame(
                {"s": model.grid, **{n: model.beta[p] for p, n in enumerate(names)}}
            ),
            "sigma2eps.csv": pd.DataFrame({"s": model.grid, "sigma2_eps": model.sigma2_eps}),
            "gamma.csv": pd.DataFrame(
                model.variance.gamma, columns=labels, index=pd.Index(names, name="covariate")
            ).reset_index(),
            "C.csv": pd.DataFrame(model.correlation.C, columns=labels),
            "delta.csv": pd.concat(
                [
                    pd.DataFrame(model.third.tuples, columns=["j1", "j2", "j3"]),
                    pd.DataFrame(model.third.delta, columns=names),
                ],
                axis=1,
            ),
            "eta.csv": pd.concat(
                [
                    pd.DataFrame(model.fourth.tuples, columns=["j1", "j2", "j3", "j4"]),
                    pd.DataFrame(
                        {
                            "branch": [
                                (FourthBranch.LOG_LINK if flag else FourthBranch.LINEAR).value
                                for flag in model.fourth.log_link
                            ]
                        }
                    ),
                    pd.DataFrame(model.fourth.eta, columns=names),
                ],
                axis=1,
            ),
        }
        if model.correlation.has_eigenmodel:
            frames["eigenvectors.csv"] = pd.DataFrame(model.correlation.eigenvectors, columns=labels)
            frames["eigen_coefficients.csv"] = pd.DataFrame(
                model.correlation.eigen_coefficients,
                columns=labels,
                index=pd.Index(names, name="covariate"),
            ).reset_index()
        frames.update(diagnostics or {})

        checksums = {}
        for filename, frame in frames.items():
            path = directory / filename
            write_csv(frame, path)
            checksums[filename] = file_checksum(path)

        manifest: Dict[str, Any] = {
            "version": MANIFEST_VERSION,
            "config_hash": config_hash,
            "seed": seed,
            "basis": model.basis.to_dict(),
            "grid": [float(v) for v in model.grid],
            "covariate_names": list(names),
            "lambdas": None
            if model.fosr.lambdas is None
            else [float(v) for v in model.fosr.lambdas],
            "lambda_scores": None if model.scores is None else model.scores.lambda_scores,
            "data_files": {
                key: self.get_relative_path(str(value), str(directory))
                for key, value in (data_files or {}).items()
            },
            "checksums": checksums,
        }
        if extra:
            manifest.update(extra)
        with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)

        self.current_dir = directory
        logger.debug("拟合结果已写入 {}", directory)
        return directory / MANIFEST_NAME

    def load_manifest(self, directory) -> Dict[str, Any]:
        path = Path(directory) / MANIFEST_NAME
        if not path.is_file():
            raise DataError(f"找不到拟合清单: {path}")
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        manifest["data_files"] = {
            key: self.get_absolute_path(value, str(directory))
            for key, value in manifest.get("data_files", {}).items()
        }
        return manifest

    def load_model(self, directory) -> MomentModel:
        """重建 MomentModel；任何结果文件缺失或校验和不符都报 DataError"""
        directory = Path(directory)
        manifest = self.load_manifest(directory)
        changed = self._changed_files(directory, manifest)
        if changed:
            details = ", ".join(f"{name}（{reason}）" for name, reason in changed.items())
            raise DataError(f"{directory} 中的拟合结果文件不可用: {details}")
        names = manifest["covariate_names"]
        grid = np.asarray(manifest["grid"], dtype=float)
        basis_info = manifest["basis"]
        basis = build_cyclic_basis(
            basis_info["degree"],
            tuple(basis_info["boundary"]),
            basis_info["n_basis"],
            grid,
            interior_knots=basis_info["interior_knots"],
        )

        def read(filename: str, **kwargs) -> pd.DataFrame:
            path = directory / filename
            if not path.is_file():
                raise DataError(f"拟合结果缺少文件: {path}")
            return pd.read_csv(path, **kwargs)

        beta = read("beta.csv")[names].to_numpy().T
        sigma2 = read("sigma2eps.csv")["sigma2_eps"].to_numpy()
        gamma = read("gamma.csv", dtype={"covariate": str}).set_index("covariate").loc[names].to_numpy()
        C = read("C.csv").to_numpy()

        delta_frame = read("delta.csv")
        third_tuples = delta_frame[["j1", "j2", "j3"]].to_numpy(dtype=int)
        eta_frame = read("eta.csv")
        fourth_tuples = eta_frame[["j1", "j2", "j3", "j4"]].to_numpy(dtype=int)

        eigenvectors = eigen_coefficients = None
        if (directory / "eigenvectors.csv").is_file():
            eigenvectors = read("eigenvectors.csv").to_numpy()
            eigen_coefficients = (
                read("eigen_coefficients.csv", dtype={"covariate": str}).set_index("covariate").loc[names].to_numpy()
            )

        lambdas = manifest.get("lambdas")
        self.current_dir = directory
        return MomentModel(
            basis=basis,
            fosr=FoSRFit(
                beta_raw=beta,
                beta_smooth=beta,
                residuals=np.zeros((0, len(grid))),
                design_pinv=np.zeros((len(names), 0)),
                lambdas=None if lambdas is None else np.asarray(lambdas),
            ),
            covariate_names=list(names),
            sigma2_eps=sigma2,
            variance=VarianceModel(gamma=gamma),
            correlation=CorrelationModel(
                C=C, eigenvectors=eigenvectors, eigen_coefficients=eigen_coefficients
            ),
            third=ThirdMomentModel(
                tuples=third_tuples,
                delta=delta_frame[names].to_numpy(),
                weights=multiplicity_weights(third_tuples),
            ),
            fourth=FourthMomentModel(
                tuples=fourth_tuples,
                eta=eta_frame[names].to_numpy(),
                log_link=(eta_frame["branch"] == FourthBranch.LOG_LINK.value).to_numpy(),
                weights=multiplicity_weights(fourth_tuples),
            ),
        )

    def get_relative_path(self, file_path: str, base_path: str) -> str:
        try:
            return os.path.relpath(file_path, base_path)
        except ValueError:
            # 不同驱动器，返回绝对路径
            return file_path

    def get_absolute_path(self, relative_path: str, base_path: str) -> str:
        if os.path.isabs(relative_path):
            return relative_path
        return os.path.abspath(os.path.join(base_path, relative_path))

    def is_modified(self, directory=None) -> bool:
        """磁盘上的结果文件是否在写出后被改动（或缺失）"""
        directory = Path(directory or self.current_dir)
        return bool(self._changed_files(directory, self.load_manifest(directory)))

    @staticmethod
    def _changed_files(directory: Path, manifest: Dict[str, Any]) -> Dict[str, str]:
        changed = {}
        for filename, checksum in manifest.get("checksums", {}).items():
            path = directory / filename
            if not path.is_file():
                changed[filename] = "缺失"
            elif file_checksum(path) != checksum:
                changed[filename] = "在写出后被修改"
        return changed
