import numpy as np
import pandas as pd
import pytest
from scipy import stats
from scipy.integrate import simpson

from src.core.basis import build_cyclic_basis
from src.core.errors import ConfigError, DataError
from src.core.fosr import fit_fosr
from src.core.models import BandKind, BandResult
from src.core.sim import (
    SCORE_COPULA,
    SCORE_LOADINGS,
    CoverageCell,
    DGPSpec,
    batch_means,
    draw_scores,
    generate_dataset,
    generate_scores,
    ise,
    run_coverage_experiment,
    simulate_residuals,
    standardized_scores,
    true_fixed_effects,
    true_noise_variance,
    truth_model,
)
from src.core.surface import excess_kurtosis_curve, skewness_curve, variance_curve
from src.core.targets import TargetSpec

FEW_TRUTH_DRAWS = 200_000


def test_fixed_effect_closed_forms():
    assert true_fixed_effects(5.0 / 36.0)[0] == pytest.approx(0.7, abs=1e-12)
    assert true_noise_variance(0.0) == pytest.approx(0.1 + 0.35 * np.exp(-4.0) + 0.25)
    assert true_noise_variance(0.0) == pytest.approx(0.35641, abs=1e-5)
    grid = np.linspace(0.0, 1.0, 2001)
    assert np.all(true_noise_variance(grid) > 0.1)
    assert true_fixed_effects(grid).shape == (4, 2001)



def test_intercept_is_a_bounded_activity_profile():
    # 峰值 2.5、谷值 0.7，谷在 s=5/36
    s = 0.5
    expected = 2.5 - 1.8 * np.exp(-2.0 * (1.0 - np.cos((2.0 * s - 5.0 / 18.0) * np.pi)))
    assert true_fixed_effects(s)[0] == pytest.approx(expected, abs=1e-12)
    assert true_fixed_effects(s)[0] == pytest.approx(2.43265, abs=1e-4)
    beta0 = true_fixed_effects(np.linspace(0.0, 1.0, 2001))[0]
    assert beta0.min() >= 0.7 - 1e-12
    assert beta0.max() <= 2.5


@pytest.mark.parametrize(
    "row, breakpoint",
    [(1, 1 / 3), (2, 5 / 24), (2, 5 / 12), (2, 5 / 6), (3, 1 / 8), (3, 7 / 24)],
)
def test_fixed_effects_are_continuous_at_breakpoints(row, breakpoint):
    left, right = true_fixed_effects(np.array([breakpoint - 1e-9, breakpoint + 1e-9]))[row]
    assert left == pytest.approx(right, abs=1e-6)


def test_fixed_effects_reject_points_outside_unit_interval():
    with pytest.raises(DataError):
        true_fixed_effects([0.5, 1.2])
    with pytest.raises(DataError):
        true_noise_variance(-0.1)


def test_copula_is_a_valid_correlation_matrix():
    np.testing.assert_allclose(SCORE_COPULA, SCORE_COPULA.T)
    np.testing.assert_allclose(np.diag(SCORE_COPULA), 1.0)
    assert np.linalg.eigvalsh(SCORE_COPULA).min() > 0


def test_standardized_marginals_have_unit_variance():
    latent = np.random.default_rng(0).standard_normal((FEW_TRUTH_DRAWS, 5))
    xi_star = standardized_scores(latent)
    se = xi_star.std(axis=0) / np.sqrt(len(xi_star))
    assert np.all(np.abs(xi_star.mean(axis=0)) < 4 * se)
    squares = xi_star**2
    se_var = squares.std(axis=0) / np.sqrt(len(xi_star))
    assert np.all(np.abs(squares.mean(axis=0) - 1.0) < 4 * se_var)
    # 负号变换后形状 3 的分量左偏，形状 4 的分量右偏
    assert stats.skew(xi_star[:, 0]) < 0
    assert stats.skew(xi_star[:, 4]) > 0
    np.testing.assert_array_equal(standardized_scores(latent[:10], gaussian=True), latent[:10])


def test_score_variance_at_zero_covariates():
    rng = np.random.default_rng(1)
    xi = draw_scores(np.zeros((FEW_TRUTH_DRAWS, 3)), rng)
    squares = xi**2
    se = squares.std(axis=0) / np.sqrt(len(xi))
    assert np.all(np.abs(squares.mean(axis=0) - np.exp(SCORE_LOADINGS[:, 0])) < 4 * se)
    # ξ*_1 与 ξ*_3 都取负号变换，相关符号与 Σ₀ 一致
    assert np.corrcoef(xi[:, 0], xi[:, 2])[0, 1] > 0


def test_generate_scores_is_seeded():
    first = generate_scores([10.0, 1.0, 0.0], seed=5)
    assert first.shape == (5,)
    np.testing.assert_array_equal(first, generate_scores([10.0, 1.0, 0.0], seed=5))
    assert not np.array_equal(first, generate_scores([10.0, 1.0, 0.0], seed=6))
    with pytest.raises(DataError):
        generate_scores([1.0, 2.0], seed=0)


def test_noiseless_dataset_is_the_fixed_effect_surface():
    spec = DGPSpec(n_subjects=10, n_points=144, seed=3, include_scores=False, include_noise=False)
    simulated = generate_dataset(spec)
    data = simulated.data
    np.testing.assert_array_equal(data.Y, data.X @ true_fixed_effects(data.grid))
    np.testing.assert_array_equal(simulated.scores, 0.0)
    np.testing.assert_allclose(np.diff(data.grid), 1.0 / 144, atol=1e-15)
    assert data.grid[-1] == 1.0
    assert data.covariate_names == ["x1", "x2", "x3", "x4"]


def test_dataset_generation_is_reproducible():
    spec = DGPSpec(n_subjects=20, n_points=48, seed=9)
    first, second = generate_dataset(spec), generate_dataset(spec)
    np.testing.assert_array_equal(first.data.Y, second.data.Y)
    np.testing.assert_array_equal(first.data.X, second.data.X)
    X = first.data.X
    assert np.all(X[:, 0] == 1.0)
    assert np.all(np.abs(X[:, 1]) <= 30.0)
    assert set(np.unique(X[:, 2])) <= {0.0, 1.0}


def test_dgp_spec_validation():
    with pytest.raises(ConfigError):
        DGPSpec(n_subjects=0)
    with pytest.raises(ConfigError):
        DGPSpec(n_points=3)
    assert DGPSpec().to_dict()["score_loadings"][3][1] == -0.8


def test_truth_without_scores_is_noise_only():
    spec = DGPSpec(n_points=48, include_scores=False)
    truth = truth_model(spec)
    np.testing.assert_allclose(
        variance_curve(truth, [1.0, 10.0, 0.0, 0.0]), true_noise_variance(spec.grid)
    )
    np.testing.assert_allclose(excess_kurtosis_curve(truth, [1.0, -10.0, 1.0, 0.0]), 0.0, atol=1e-12)


def test_truth_variance_matches_simulated_residuals():
    spec = DGPSpec(n_points=144, truth_draws=FEW_TRUTH_DRAWS)
    x = np.array([1.0, 10.0, 0.0, 0.0])
    points = [0, 30, 60, 90, 120]
    closed = variance_curve(truth_model(spec), x)[points]
    samples = simulate_residuals(spec, x, points, FEW_TRUTH_DRAWS, seed=11)
    empirical, se = batch_means(lambda a: a.var(axis=0), samples)
    assert np.all(np.abs(closed - empirical) <= 4 * se + 1e-3 * closed)


def test_ise_closed_cases():
    grid = np.arange(1, 145) / 144
    curve = np.sin(2 * np.pi * grid)
    assert ise(curve, curve, grid, 1.0) == 0.0
    assert ise(curve + 0.3, curve, grid, 1.0) == pytest.approx(0.09, rel=1e-12)
    with pytest.raises(DataError):
        ise(curve[:-1], curve, grid)


def test_ise_matches_refined_quadrature():
    grid = np.arange(1, 145) / 144
    fine = np.linspace(0.0, 1.0, 14401)

    def error(s):
        return 0.4 * np.sin(2 * np.pi * s) + 0.2 * np.cos(6 * np.pi * s) + 0.1

    expected = simpson(error(fine) ** 2, x=fine)
    assert ise(error(grid), np.zeros_like(grid), grid, 1.0) == pytest.approx(expected, rel=0.01)


def test_coverage_cell_frequency():
    assert CoverageCell(100, 144).frequency == 10.0
    assert CoverageCell(100, 480).frequency == 3.0
    assert CoverageCell(100, 1440).frequency == 1.0


def test_band_coverage_sanity_bounds():
    truth = np.linspace(0.0, 1.0, 10)
    zero_width = BandResult(
        estimate=truth + 1.0, lower=truth + 1.0, upper=truth + 1.0,
        kind=BandKind.WALD, alpha=0.05, q_lo=0.0, q_hi=0.0, collapsed=np.zeros(10, bool),
    )
    infinite = BandResult(
        estimate=truth, lower=np.full(10, -np.inf), upper=np.full(10, np.inf),
        kind=BandKind.CMA_SYMMETRIC, alpha=0.05, q_lo=-np.inf, q_hi=np.inf,
        collapsed=np.zeros(10, bool),
    )
    assert not zero_width.covers(truth).any()
    assert infinite.covers(truth).all()


def test_fixed_effect_ise_decreases_with_sample_size():
    medians = {}
    for n_subjects in (100, 1000):
        values = []
        for replicate in range(20):
            data = generate_dataset(DGPSpec(n_subjects=n_subjects, n_points=144, seed=replicate)).data
            basis = build_cyclic_basis(3, (0.0, 1.0), 20, data.grid)
            fit = fit_fosr(data, basis)
            truth = true_fixed_effects(data.grid)
            values.append([ise(fit.beta_smooth[p], truth[p], data.grid, 1.0) for p in range(4)])
        medians[n_subjects] = np.median(values, axis=0)
    assert np.all(medians[1000] < medians[100])


SMALL_TARGETS = [TargetSpec.parse("beta:0"), TargetSpec.parse("beta:x3")]


def small_experiment(threads: int = 1, spec: DGPSpec | None = None, **kwargs):
    spec = spec or DGPSpec(n_subjects=40, n_points=48, seed=21, truth_draws=FEW_TRUTH_DRAWS)
    return run_coverage_experiment(spec, 2, 40, SMALL_TARGETS, threads=threads, **kwargs)


def test_coverage_experiment_report_layout():
    report = small_experiment()
    assert report.n_replicates == 2
    assert not report.failures
    coverage = report.coverage
    assert list(coverage.columns) == ["method", "parameter", "probe", "N", "frequency", "coverage"]
    assert len(coverage) == 3 * len(SMALL_TARGETS)
    assert set(coverage["method"]) == {kind.value for kind in BandKind}
    assert set(coverage["parameter"]) == {"beta0", "betax3"}
    assert coverage["coverage"].between(0.0, 1.0).all()
    assert (coverage["frequency"] == 30.0).all()

    assert len(report.ise) == 2 * len(SMALL_TARGETS)
    assert sorted(report.ise["replicate"].unique()) == [0, 1]
    assert (report.ise["ise"] >= 0).all()


def test_coverage_experiment_is_deterministic_across_threads():
    first = small_experiment(threads=1)
    second = small_experiment(threads=2)
    pd.testing.assert_frame_equal(first.coverage, second.coverage)
    pd.testing.assert_frame_equal(first.ise, second.ise)


def test_coverage_experiment_builds_only_requested_bands():
    report = run_coverage_experiment(
        DGPSpec(n_subjects=40, n_points=48, seed=21, truth_draws=FEW_TRUTH_DRAWS),
        1,
        10,
        SMALL_TARGETS[:1],
        kinds=[BandKind.WALD],
    )
    assert set(report.coverage["method"]) == {"wald"}


def test_coverage_experiment_covers_multiple_cells():
    spec = DGPSpec(n_subjects=40, n_points=48, seed=2, truth_draws=FEW_TRUTH_DRAWS)
    report = run_coverage_experiment(
        spec, 1, 40, SMALL_TARGETS[:1], cells=[CoverageCell(40, 48), CoverageCell(60, 96)]
    )
    assert set(zip(report.coverage["N"], report.coverage["frequency"])) == {(40, 30.0), (60, 15.0)}


def test_failed_replicates_are_recorded():
    spec = DGPSpec(n_subjects=3, n_points=48, seed=0, truth_draws=FEW_TRUTH_DRAWS)
    report = run_coverage_experiment(spec, 2, 40, SMALL_TARGETS)
    assert len(report.failures) == 2
    assert report.coverage.empty
    assert {"N", "frequency", "replicate", "error"} <= set(report.failures[0])
    with pytest.raises(ConfigError):
        run_coverage_experiment(spec, 0, 40, SMALL_TARGETS)


@pytest.mark.slow
@pytest.mark.parametrize("x", [[1.0, -10.0, 0.0, 0.0], [1.0, 10.0, 0.0, 0.0]])
def test_closed_form_skewness_and_kurtosis_match_brute_force(x):
    spec = DGPSpec(n_points=144)
    truth = truth_model(spec)
    points = list(range(0, 144, 15))[:10]
    samples = simulate_residuals(spec, x, points, 1_000_000, seed=2024)

    empirical, se = batch_means(lambda a: stats.skew(a, axis=0), samples)
    closed = skewness_curve(truth, x)[points]
    # 真值本身也来自同样规模的蒙特卡洛
    assert np.all(np.abs(closed - empirical) <= 3 * np.sqrt(2) * se)

    empirical, se = batch_means(lambda a: stats.kurtosis(a, axis=0), samples)
    closed = excess_kurtosis_curve(truth, x)[points]
    assert np.all(np.abs(closed - empirical) <= 3 * np.sqrt(2) * se)


@pytest.mark.slow
def test_wald_intercept_coverage_at_desk_scale():
    targets = [TargetSpec.parse(f"beta:{p}") for p in range(4)] + [TargetSpec.parse("sigma2_eps")]
    report = run_coverage_experiment(
        DGPSpec(n_subjects=300, n_points=144, seed=0), 50, 100, targets, threads=-1
    )
    wald = report.coverage.set_index(["method", "parameter"]).loc["wald", "coverage"]
    assert 0.90 <= wald["beta0"] <= 0.99
    # N=300、10 分钟采样下的参考覆盖率
    reference = {"beta0": 0.952, "beta1": 0.948, "beta2": 0.951, "beta3": 0.956, "sigma2_eps": 0.937}
    for parameter, value in reference.items():
        assert abs(wald[parameter] - value) <= 0.05, parameter


@pytest.mark.slow
def test_asymmetric_cma_undercovers_conditional_variance():
    target = [TargetSpec.parse("variance:1,-10,0,0")]
    report = run_coverage_experiment(
        DGPSpec(seed=0),
        50,
        100,
        target,
        cells=[CoverageCell(100, 144), CoverageCell(1000, 144)],
        threads=-1,
    )
    rows = report.coverage[report.coverage["method"] == "cma_asymmetric"].set_index("N")
    assert rows.loc[100, "coverage"] <= 0.75
    assert rows.loc[1000, "coverage"] > rows.loc[100, "coverage"]
