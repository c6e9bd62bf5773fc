import numpy as np
import pytest
from scipy.stats import skewnorm

from kposense.estimator import (EnsembleSnapshot, SkewNormalFit,
                                bootstrap_estimate_curves, estimator_statistics,
                                fit_skew_normal, make_histogram, mode_of_fit,
                                skew_normal_pdf, snapshot, tail_fraction,
                                write_fit_series_csv, write_stats_csv)


def sample_peak(n, mu=1.0, sigma=0.1, alpha=3.0, seed=0):
    # scipy's shape parameter feeds erf(a u / sqrt(2)); our peak model uses
    # erf(alpha u), so a = sqrt(2) * alpha
    return skewnorm(a=np.sqrt(2) * alpha, loc=mu, scale=sigma).rvs(
        n, random_state=np.random.default_rng(seed))


class FakeTrajectory:
    def __init__(self, value):
        self.value = value

    def omega_at(self, t):
        return self.value + 0.0 * t


class TestSnapshot:
    def test_from_trajectory_list(self):
        snap = snapshot([FakeTrajectory(v) for v in (1.0, 1.2, 0.9)], t=10.0)
        assert snap.n_traj == 3
        np.testing.assert_array_equal(np.sort(snap.samples), [0.9, 1.0, 1.2])

    def test_single_trajectory(self):
        snap = snapshot([FakeTrajectory(1.1)], t=5.0)
        assert snap.n_traj == 1

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            EnsembleSnapshot(t=0.0, samples=[])
        with pytest.raises(ValueError):
            EnsembleSnapshot(t=0.0, samples=[1.0, np.nan])


class TestMakeHistogram:
    def test_uniform_density(self):
        rng = np.random.default_rng(1)
        snap = EnsembleSnapshot(0.0, rng.uniform(0, 1, 1000))
        hist = make_histogram(snap)
        assert np.all(np.abs(hist.density - 1.0) < 0.5)

    def test_normalization(self):
        rng = np.random.default_rng(2)
        for rule in ("fd", "scott", "shorth", 40):
            snap = EnsembleSnapshot(0.0, rng.normal(1, 0.3, 500))
            hist = make_histogram(snap, rule=rule)
            assert hist.counts.sum() == 500
            assert np.sum(hist.density * np.diff(hist.bin_edges)) == pytest.approx(
                1.0, abs=1e-12)

    def test_identical_samples_flagged_degenerate(self):
        hist = make_histogram(EnsembleSnapshot(0.0, np.full(200, 1.0)))
        assert hist.degenerate
        assert len(hist.counts) == 1

    def test_minimum_sample_count(self):
        with pytest.raises(ValueError):
            make_histogram(EnsembleSnapshot(0.0, np.arange(5.0)))

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            make_histogram(EnsembleSnapshot(0.0, np.arange(20.0)), rule="magic")


class TestFitSkewNormal:
    def test_parameter_recovery_on_synthetic_data(self):
        x = sample_peak(5000, mu=1.0, sigma=0.1, alpha=3.0, seed=5)
        fit = fit_skew_normal(make_histogram(EnsembleSnapshot(0.0, x)))
        assert fit.converged
        assert fit.mu == pytest.approx(1.0, abs=0.02)
        assert np.sign(fit.alpha) == 1.0

    def test_symmetric_data_fits_near_gaussian(self):
        rng = np.random.default_rng(6)
        x = rng.normal(2.0, 0.3, 10_000)
        fit = fit_skew_normal(make_histogram(EnsembleSnapshot(0.0, x)))
        assert abs(fit.alpha) < 0.5
        assert fit.mode == pytest.approx(2.0, abs=0.03)

    def test_scale_equivariance(self):
        x = sample_peak(4000, mu=1.0, sigma=0.1, alpha=3.0, seed=7)
        f1 = fit_skew_normal(make_histogram(EnsembleSnapshot(0.0, x)))
        c = 2.5
        f2 = fit_skew_normal(make_histogram(EnsembleSnapshot(0.0, c * x)))
        assert f2.mu == pytest.approx(c * f1.mu, rel=1e-3)
        assert f2.sigma == pytest.approx(c * f1.sigma, rel=1e-3)
        assert f2.mode == pytest.approx(c * f1.mode, rel=1e-3)

    def test_init_hint_respected(self):
        x = sample_peak(2000, seed=8)
        hist = make_histogram(EnsembleSnapshot(0.0, x))
        fit = fit_skew_normal(hist, init_hint=(2.0, 1.0, 0.1, 2.0))
        assert fit.converged

    def test_rejects_degenerate_histogram(self):
        hist = make_histogram(EnsembleSnapshot(0.0, np.full(100, 2.0)))
        with pytest.raises(ValueError):
            fit_skew_normal(hist)


class TestModeOfFit:
    def test_symmetric_case_exact(self):
        fit = SkewNormalFit(amplitude=1.0, mu=1.3, sigma=0.2, alpha=0.0,
                            mode=np.nan, converged=True, residual=0.0)
        assert mode_of_fit(fit) == 1.3

    def test_skew_shifts_mode(self):
        right = SkewNormalFit(1.0, 1.0, 0.2, 2.0, np.nan, True, 0.0)
        left = SkewNormalFit(1.0, 1.0, 0.2, -2.0, np.nan, True, 0.0)
        assert mode_of_fit(right) > 1.0
        assert mode_of_fit(left) < 1.0

    def test_matches_dense_grid_argmax(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            A = rng.uniform(0.5, 5.0)
            mu = rng.uniform(-2, 2)
            sigma = rng.uniform(0.05, 1.0)
            alpha = rng.uniform(-4, 4)
            fit = SkewNormalFit(A, mu, sigma, alpha, np.nan, True, 0.0)
            mode = mode_of_fit(fit)
            # two-stage grid so the oracle resolution beats the tolerance
            grid = np.linspace(mu - 5 * sigma, mu + 5 * sigma, 40_001)
            k = np.argmax(skew_normal_pdf(grid, A, mu, sigma, alpha))
            step = grid[1] - grid[0]
            fine = np.linspace(grid[k] - step, grid[k] + step, 20_001)
            dense = fine[np.argmax(skew_normal_pdf(fine, A, mu, sigma, alpha))]
            assert mode == pytest.approx(dense, abs=1e-5)

    def test_amplitude_invariance(self):
        a = SkewNormalFit(1.0, 0.5, 0.3, 1.5, np.nan, True, 0.0)
        b = SkewNormalFit(7.3, 0.5, 0.3, 1.5, np.nan, True, 0.0)
        assert mode_of_fit(a) == pytest.approx(mode_of_fit(b), abs=1e-9)


class TestTailFraction:
    def test_extremes(self):
        snap = EnsembleSnapshot(0.0, np.linspace(1.0, 2.0, 50))
        assert tail_fraction(snap, 0.5) == 1.0
        assert tail_fraction(snap, 2.5) == 0.0

    def test_strict_inequality(self):
        snap = EnsembleSnapshot(0.0, np.array([1.0, 1.0, 2.0, 3.0]))
        assert tail_fraction(snap, 1.0) == pytest.approx(0.5)


class TestStatistics:
    def test_identical_runs(self):
        runs = np.tile(np.array([1.1, 1.2, 1.3]), (5, 1))
        mean, std, mse = estimator_statistics(runs, omega_true=1.0)
        np.testing.assert_array_equal(std, np.zeros(3))
        np.testing.assert_allclose(mse, (mean - 1.0) ** 2)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(10)
        runs = rng.normal(1.0, 0.2, size=(40, 11))
        mean, std, mse = estimator_statistics(runs, omega_true=1.0)
        np.testing.assert_allclose(mse, std ** 2 + (mean - 1.0) ** 2,
                                   atol=1e-14)

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            estimator_statistics(np.ones((1, 4)), 1.0)

    def test_bootstrap_curves(self):
        rng = np.random.default_rng(11)
        pool = rng.normal(1.0, 0.1, size=(300, 3))
        curves = bootstrap_estimate_curves(pool, n_traj=100, n_boot=5,
                                           base_seed=3)
        assert curves.shape == (5, 3)
        finite = curves[np.isfinite(curves)]
        assert len(finite) > 0
        assert np.all(np.abs(finite - 1.0) < 0.2)

    def test_bootstrap_deterministic(self):
        rng = np.random.default_rng(12)
        pool = rng.normal(1.0, 0.1, size=(100, 2))
        a = bootstrap_estimate_curves(pool, 50, 3, base_seed=9)
        b = bootstrap_estimate_curves(pool, 50, 3, base_seed=9)
        np.testing.assert_array_equal(a, b)


class TestCsvWriters:
    def test_fit_series(self, tmp_path):
        fit = SkewNormalFit(1.0, 1.1, 0.2, 0.5, 1.15, True, 0.01)
        path = tmp_path / "fits.csv"
        write_fit_series_csv(path, [10.0, 20.0], [fit, None])
        lines = path.read_text().splitlines()
        assert lines[0] == "t,mode,mu,sigma,alpha,residual"
        assert lines[1].startswith("10,1.1499")
        assert "nan" in lines[2]

    def test_stats(self, tmp_path):
        path = tmp_path / "stats.csv"
        write_stats_csv(path, [1.0], [1.1], [0.2], [0.05])
        lines = path.read_text().splitlines()
        assert lines[0] == "t,mean,std,mse"
        assert lines[1] == "1,1.1000000000000001,0.20000000000000001,0.050000000000000003"
