import math

import numpy as np
import pytest

from src.core.bands import (
    MAX_REDRAWS,
    all_bands,
    bootstrap_pipeline,
    cma_band,
    empirical_quantile,
    minimum_replicates,
    wald_band,
)
from src.core.basis import build_cyclic_basis
from src.core.errors import ConfigError, DataError, NumericError
from src.core.models import BandKind, BootstrapEnsemble, FunctionalDataset
from src.core.targets import TargetSpec

GRID = np.arange(1, 25) / 24


def gaussian_ensemble(B: int = 200, seed: int = 0, n_points: int = 24):
    rng = np.random.default_rng(seed)
    shape = 1.0 + 0.5 * np.sin(2 * np.pi * np.arange(n_points) / n_points)
    samples = rng.normal(size=(B, n_points)) * shape + rng.normal(size=(B, 1))
    return BootstrapEnsemble(target="beta:0", samples=samples, seed=seed)


def mirrored_ensemble(pairs: int = 20, seed: int = 1):
    rng = np.random.default_rng(seed)
    center = np.cos(2 * np.pi * GRID)
    h = 1.0 + 0.5 * np.sin(2 * np.pi * GRID)
    c = rng.uniform(0.5, 3.0, pairs)
    samples = np.vstack([center + c[:, None] * h, center - c[:, None] * h])
    return BootstrapEnsemble(target="variance:1", samples=samples, seed=seed)


def test_wald_multiplier_is_normal_quantile():
    ensemble = gaussian_ensemble()
    band = wald_band(ensemble, ensemble.mean, 0.05)
    assert band.q_hi == pytest.approx(1.959964, abs=1e-5)
    assert band.q_lo == -band.q_hi
    np.testing.assert_allclose(band.upper - band.estimate, band.estimate - band.lower)


def test_ensemble_sd_is_centered_on_bootstrap_mean():
    samples = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 1.0]])
    ensemble = BootstrapEnsemble(target="t", samples=samples, seed=0)
    np.testing.assert_allclose(ensemble.mean, [2.0, 1.0])
    np.testing.assert_allclose(ensemble.sd, [np.sqrt(8.0 / 3.0), 0.0])
    with pytest.raises(DataError):
        BootstrapEnsemble(target="t", samples=samples[:1], seed=0)


def test_empirical_quantile_matches_sort_and_index():
    values = np.random.default_rng(2).normal(size=37)
    ordered = np.sort(values)
    for prob in (0.05, 0.5, 0.9, 0.95, 0.975, 0.99):
        expected = ordered[math.ceil(prob * len(values)) - 1]
        assert empirical_quantile(values, prob) == expected


def test_minimum_replicates():
    assert minimum_replicates(0.05) == 40
    assert minimum_replicates(0.10) == 20
    assert minimum_replicates(0.01) == 200
    with pytest.raises(ConfigError):
        minimum_replicates(1.5)


def test_cma_requires_enough_replicates():
    ensemble = gaussian_ensemble(B=39)
    with pytest.raises(ConfigError):
        cma_band(ensemble, ensemble.mean, 0.05)
    wald_band(ensemble, ensemble.mean, 0.05)


def test_all_bands_contain_the_estimate():
    ensemble = gaussian_ensemble()
    estimate = ensemble.mean + 0.1
    bands = all_bands(ensemble, estimate, 0.05)
    assert set(bands) == set(BandKind)
    for band in bands.values():
        assert np.all(band.lower <= band.estimate)
        assert np.all(band.estimate <= band.upper)
        assert not band.flagged


def test_all_bands_builds_only_requested_kinds():
    ensemble = gaussian_ensemble(B=20)
    bands = all_bands(ensemble, ensemble.mean, 0.05, kinds=["wald"])
    assert list(bands) == [BandKind.WALD]
    full = gaussian_ensemble()
    bands = all_bands(full, full.mean, 0.05, kinds=[BandKind.CMA_ASYMMETRIC, "wald"])
    assert list(bands) == [BandKind.WALD, BandKind.CMA_ASYMMETRIC]
    with pytest.raises(ConfigError):
        all_bands(ensemble, ensemble.mean, 0.05, kinds=[])
    with pytest.raises(ValueError):
        all_bands(ensemble, ensemble.mean, 0.05, kinds=["bonferroni"])


def test_symmetric_cma_dominates_wald():
    ensemble = gaussian_ensemble(seed=3)
    wald = wald_band(ensemble, ensemble.mean)
    cma = cma_band(ensemble, ensemble.mean, symmetric=True)
    assert cma.q_hi >= wald.q_hi
    assert np.all(cma.upper - cma.lower >= wald.upper - wald.lower - 1e-12)


def standardized(ensemble: BootstrapEnsemble) -> np.ndarray:
    return (ensemble.samples - ensemble.mean) / ensemble.sd


def test_cma_multipliers_are_raw_bootstrap_quantiles():
    ensemble = gaussian_ensemble(seed=4)
    Z = standardized(ensemble)
    symmetric = cma_band(ensemble, ensemble.mean, symmetric=True)
    assert symmetric.q_hi == empirical_quantile(np.abs(Z).max(axis=1), 0.95)
    asymmetric = cma_band(ensemble, ensemble.mean, symmetric=False)
    assert asymmetric.q_hi == empirical_quantile(Z.max(axis=1), 0.975)
    assert asymmetric.q_lo == -empirical_quantile(-Z.min(axis=1), 0.975)


def test_two_point_ensemble_multiplier_is_not_raised_to_normal_quantile():
    signs = np.repeat([1.0, -1.0], 20)[:, None]
    ensemble = BootstrapEnsemble(target="t", samples=signs * np.ones((1, 24)), seed=0)
    np.testing.assert_allclose(ensemble.sd, 1.0)
    symmetric = cma_band(ensemble, np.zeros(24), 0.05, symmetric=True)
    assert symmetric.q_hi == pytest.approx(1.0)
    np.testing.assert_allclose(symmetric.upper, 1.0)
    asymmetric = cma_band(ensemble, np.zeros(24), 0.05, symmetric=False)
    assert asymmetric.q_hi == pytest.approx(1.0)
    assert asymmetric.q_lo == pytest.approx(-1.0)


def test_bands_widen_with_confidence_level():
    ensemble = gaussian_ensemble(B=400, seed=5)
    for symmetric in (True, False):
        wide = cma_band(ensemble, ensemble.mean, 0.01, symmetric)
        narrow = cma_band(ensemble, ensemble.mean, 0.10, symmetric)
        assert np.all(wide.lower <= narrow.lower)
        assert np.all(wide.upper >= narrow.upper)
    wide = wald_band(ensemble, ensemble.mean, 0.01)
    narrow = wald_band(ensemble, ensemble.mean, 0.10)
    assert np.all(wide.lower <= narrow.lower)


def test_mirrored_ensemble_gives_symmetric_asymmetric_band():
    ensemble = mirrored_ensemble()
    estimate = np.cos(2 * np.pi * GRID)
    symmetric = cma_band(ensemble, estimate, 0.05, symmetric=True)
    asymmetric = cma_band(ensemble, estimate, 0.05, symmetric=False)
    assert asymmetric.q_hi == pytest.approx(-asymmetric.q_lo, abs=1e-12)
    assert asymmetric.q_hi == pytest.approx(symmetric.q_hi, abs=1e-12)
    np.testing.assert_allclose(asymmetric.lower, symmetric.lower, atol=1e-12)
    np.testing.assert_allclose(asymmetric.upper, symmetric.upper, atol=1e-12)


def test_skewed_ensemble_gives_asymmetric_band():
    rng = np.random.default_rng(6)
    shifts = rng.exponential(size=(400, 1)) - 1.0
    samples = shifts * np.ones((1, 24)) + 0.01 * rng.normal(size=(400, 24))
    ensemble = BootstrapEnsemble(target="t", samples=samples, seed=6)
    band = cma_band(ensemble, ensemble.mean, 0.05, symmetric=False)
    assert band.q_hi > -band.q_lo
    # 指数分布左尾被截断在 -1 处
    assert -1.5 < band.q_lo < 0.0
    assert band.q_hi > 1.959964


def test_zero_sd_locations_collapse_and_are_flagged():
    ensemble = gaussian_ensemble(B=60, seed=7)
    samples = ensemble.samples.copy()
    samples[:, 5] = 2.5
    ensemble = BootstrapEnsemble(target="t", samples=samples, seed=7)
    estimate = ensemble.mean
    for band in all_bands(ensemble, estimate).values():
        assert band.flagged
        assert band.collapsed.sum() == 1
        assert band.lower[5] == band.upper[5] == pytest.approx(2.5)
        assert band.to_dict()["collapsed_points"] == 1


def test_band_rejects_mismatched_estimate():
    ensemble = gaussian_ensemble()
    with pytest.raises(DataError):
        wald_band(ensemble, np.zeros(5))
    with pytest.raises(ConfigError):
        wald_band(ensemble, ensemble.mean, alpha=0.0)


def bootstrap_data(n_subjects: int = 30, seed: int = 8) -> FunctionalDataset:
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n_subjects), rng.normal(size=n_subjects)])
    Y = (
        X @ np.vstack([np.sin(2 * np.pi * GRID), 0.5 * np.ones(GRID.size)])
        + rng.normal(size=(n_subjects, 1)) * np.cos(2 * np.pi * GRID)
        + 0.2 * rng.normal(size=(n_subjects, GRID.size))
    )
    return FunctionalDataset(Y=Y, grid=GRID, X=X)


def basis_for_grid():
    return build_cyclic_basis(3, (0.0, 1.0), 5, GRID)


def test_bootstrap_is_reproducible_and_schedule_independent():
    data = bootstrap_data()
    targets = [TargetSpec.parse("beta:0"), TargetSpec.parse("sigma2_eps")]
    first = bootstrap_pipeline(data, basis_for_grid(), 4, 17, targets)
    again = bootstrap_pipeline(data, basis_for_grid(), 4, 17, targets)
    threaded = bootstrap_pipeline(data, basis_for_grid(), 4, 17, targets, threads=2)
    assert list(first) == ["beta:0", "sigma2_eps"]
    for label in first:
        np.testing.assert_array_equal(first[label].samples, again[label].samples)
        np.testing.assert_array_equal(first[label].samples, threaded[label].samples)

    other = bootstrap_pipeline(data, basis_for_grid(), 4, 18, targets)
    assert not np.array_equal(first["beta:0"].samples, other["beta:0"].samples)


def test_bootstrap_of_conditional_variance():
    data = bootstrap_data(40, seed=9)
    target = TargetSpec.parse("variance:1,0.5")
    ensemble = bootstrap_pipeline(data, basis_for_grid(), 3, 0, [target])[target.label]
    assert ensemble.samples.shape == (3, GRID.size)
    assert np.all(ensemble.samples > 0)


def test_single_subject_bootstrap_has_zero_spread():
    data = FunctionalDataset(Y=np.sin(2 * np.pi * GRID)[None, :], grid=GRID, X=np.ones((1, 1)))
    ensemble = bootstrap_pipeline(data, basis_for_grid(), 2, 0, [TargetSpec.parse("beta:0")])
    np.testing.assert_array_equal(ensemble["beta:0"].sd, np.zeros(GRID.size))


def test_rank_deficient_resamples_are_redrawn():
    rng = np.random.default_rng(10)
    X = np.column_stack([np.ones(6), [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]])
    data = FunctionalDataset(Y=rng.normal(size=(6, GRID.size)), grid=GRID, X=X)
    ensemble = bootstrap_pipeline(data, basis_for_grid(), 20, 3, [TargetSpec.parse("beta:1")])
    assert np.all(np.isfinite(ensemble["beta:1"].samples))


def test_persistently_rank_deficient_data_fails_after_redraws():
    X = np.column_stack([np.ones(8), np.ones(8)])
    data = FunctionalDataset(Y=np.zeros((8, GRID.size)), grid=GRID, X=X)
    with pytest.raises(NumericError, match=str(MAX_REDRAWS)):
        bootstrap_pipeline(data, basis_for_grid(), 2, 0, [TargetSpec.parse("beta:0")])


def test_bootstrap_rejects_bad_arguments():
    data = bootstrap_data()
    target = [TargetSpec.parse("beta:0")]
    with pytest.raises(ConfigError):
        bootstrap_pipeline(data, basis_for_grid(), 1, 0, target)
    with pytest.raises(ConfigError):
        bootstrap_pipeline(data, basis_for_grid(), 2, 0, [])
    with pytest.raises(ConfigError):
        bootstrap_pipeline(data, basis_for_grid(), 2, -1, target)
