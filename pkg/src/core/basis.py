"""
周期 B 样条基
在闭合区间上构造循环 B 样条基函数及其二阶导数惩罚矩阵
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from loguru import logger
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.interpolate import BSpline

from .errors import ConfigError, DataError

_BOUNDARY_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class BasisSystem:
    """周期 B 样条基（构造后不可变，可跨线程共享）"""

    degree: int
    boundary: tuple[float, float]
    interior_knots: tuple[float, ...]
    grid: np.ndarray
    knots: np.ndarray  # 周期延拓后的完整节点序列
    design: np.ndarray  # T×J 网格求值矩阵

    @property
    def n_basis(self) -> int:
        """基函数个数 J（周期识别后的不同节点数）"""
        return len(self.interior_knots) + 1

    @property
    def period(self) -> float:
        return self.boundary[1] - self.boundary[0]

    @property
    def distinct_knots(self) -> np.ndarray:
        return np.concatenate(([self.boundary[0]], self.interior_knots))

    @cached_property
    def design_sparse(self) -> sparse.csr_matrix:
        """带状求值矩阵的稀疏形式，T 较大时用于矩阵乘积"""
        return sparse.csr_matrix(self.design)

    @cached_property
    def penalty(self) -> np.ndarray:
        return penalty_matrix(self)

    def evaluate(self, s, derivative: int = 0) -> np.ndarray:
        """在任意点 s 上求值（或求 derivative 阶导数），返回 len(s)×J 矩阵"""
        points = np.atleast_1d(np.asarray(s, dtype=float))
        _check_inside(points, self.boundary)

        return _evaluate_wrapped(
            self.knots, self.degree, self.n_basis, points, derivative
        )

    def design_for(self, grid) -> np.ndarray:
        """网格与构造时相同时复用缓存的求值矩阵"""
        grid = np.asarray(grid, dtype=float)
        if grid.shape == self.grid.shape and np.array_equal(grid, self.grid):
            return self.design
        return self.evaluate(grid)

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "boundary": list(self.boundary),
            "interior_knots": list(self.interior_knots),
            "n_basis": self.n_basis,
        }


def _check_inside(points: np.ndarray, boundary: tuple[float, float]):
    lo, hi = boundary
    slack = _BOUNDARY_TOLERANCE * max(1.0, abs(hi - lo))
    outside = (points < lo - slack) | (points > hi + slack)
    if np.any(outside):
        bad = points[outside][0]
        raise DataError(f"网格点 {bad!r} 不在基函数定义域 [{lo}, {hi}] 内")


def _evaluate_wrapped(
    knots: np.ndarray, degree: int, n_basis: int, points: np.ndarray, derivative: int
) -> np.ndarray:
    n_extended = len(knots) - degree - 1
    spline = BSpline(knots, np.eye(n_extended), degree, extrapolate=True)
    raw = spline(points, nu=derivative)

    # 前 degree 个基函数与其平移一个周期后的副本合并
    wrapped = raw[:, :n_basis].copy()
    wrapped[:, :degree] += raw[:, n_basis:]
    return wrapped


def _extended_knots(distinct: np.ndarray, degree: int, period: float) -> np.ndarray:
    n_distinct = len(distinct)
    return np.array(
        [
            distinct[i % n_distinct] + (i // n_distinct) * period
            for i in range(-degree, n_distinct + degree + 1)
        ]
    )


def build_cyclic_basis(
    degree: int,
    boundary: tuple[float, float],
    n_knots: int,
    grid,
    interior_knots=None,
) -> BasisSystem:
    """构造周期 B 样条基

    n_knots 为周期识别后的不同节点数（含左端点），默认等距分布；
    也可以显式给出 interior_knots，此时 n_knots 必须等于 len(interior_knots) + 1。
    """
    lo, hi = float(boundary[0]), float(boundary[1])
    if not hi > lo:
        raise ConfigError(f"定义域端点无效: [{lo}, {hi}]")
    if degree < 1:
        raise ConfigError(f"样条阶数必须 >= 1，当前为 {degree}")
    if n_knots < degree + 1:
        raise ConfigError(
            f"节点数 {n_knots} 过少：{degree} 阶周期样条至少需要 {degree + 1} 个节点"
        )

    if interior_knots is None:
        period = hi - lo
        interior = tuple(lo + period * i / n_knots for i in range(1, n_knots))
    else:
        interior = tuple(float(k) for k in interior_knots)
        if len(interior) + 1 != n_knots:
            raise ConfigError(
                f"内部节点数 {len(interior)} 与节点总数 {n_knots} 不一致"
            )
        if any(k <= lo or k >= hi for k in interior) or any(
            a >= b for a, b in zip(interior, interior[1:])
        ):
            raise ConfigError("内部节点必须严格递增且位于定义域内部")

    grid = np.asarray(grid, dtype=float).ravel()
    _check_inside(grid, (lo, hi))

    distinct = np.concatenate(([lo], interior))
    knots = _extended_knots(distinct, degree, hi - lo)

    design = _evaluate_wrapped(knots, degree, n_knots, grid, 0)
    logger.debug("构造周期样条基: degree={}, J={}, T={}", degree, n_knots, len(grid))
    return BasisSystem(
        degree=degree,
        boundary=(lo, hi),
        interior_knots=interior,
        grid=grid,
        knots=knots,
        design=design,
    )


def penalty_matrix(basis: BasisSystem) -> np.ndarray:
    """P_jk = ∫ φ''_j φ''_k ds，逐节点区间 Gauss-Legendre 精确积分"""
    if basis.degree < 2:
        raise ConfigError("二阶导数惩罚要求样条阶数 >= 2")

    nodes, weights = leggauss(basis.degree + 1)
    edges = np.append(basis.distinct_knots, basis.boundary[1])
    lefts, rights = edges[:-1], edges[1:]
    half = (rights - lefts) / 2.0
    points = (lefts[:, None] + half[:, None] * (nodes[None, :] + 1.0)).ravel()
    scaled_weights = (half[:, None] * weights[None, :]).ravel()

    second = basis.evaluate(points, derivative=2)
    penalty = (second * scaled_weights[:, None]).T @ second
    return (penalty + penalty.T) / 2.0
