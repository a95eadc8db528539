"""Unit tests for Gaussian algebra, ball volumes and lattice utilities."""

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from pwabc.core_math import (
    GaussianDensity,
    Lattice,
    LpBallSpec,
    SingularCovarianceError,
    ball_volume,
    gaussian_logpdf,
    gaussian_logpdf_batch,
    gaussian_product,
    lattice_integral,
    log_sum_exp,
    regularize_cov,
)


class TestRegularizeCov:
    def test_spd_passthrough(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        out = regularize_cov(cov)
        assert np.allclose(out, cov)

    def test_symmetrises(self):
        cov = np.array([[2.0, 0.5], [0.1, 1.0]])
        out = regularize_cov(cov)
        assert np.allclose(out, out.T)

    def test_zero_matrix_gets_floor(self):
        out = regularize_cov(np.zeros((2, 2)))
        np.linalg.cholesky(out)
        assert out[0, 0] > 0

    def test_rank_deficient_jittered(self):
        v = np.array([1.0, 2.0])
        cov = np.outer(v, v)  # rank 1
        out = regularize_cov(cov)
        np.linalg.cholesky(out)

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            regularize_cov(np.zeros((2, 3)))

    def test_hopeless_matrix_raises(self):
        with pytest.raises(SingularCovarianceError):
            regularize_cov(np.array([[1.0, 0.0], [0.0, -1e6]]))


class TestGaussianLogpdf:
    def test_matches_scipy_1d(self):
        g = GaussianDensity(np.array([0.3]), np.array([[2.0]]))
        x = np.array([1.1])
        assert gaussian_logpdf(x, g) == pytest.approx(
            norm.logpdf(1.1, loc=0.3, scale=math.sqrt(2.0)), rel=1e-12
        )

    def test_matches_scipy_3d_batch(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(3, 3))
        cov = A @ A.T + np.eye(3)
        mean = rng.normal(size=3)
        pts = rng.normal(size=(50, 3))
        ours = gaussian_logpdf_batch(pts, mean, cov)
        ref = multivariate_normal(mean=mean, cov=cov).logpdf(pts)
        assert np.allclose(ours, ref, rtol=1e-10)

    def test_dimension_mismatch(self):
        g = GaussianDensity(np.zeros(2), np.eye(2))
        with pytest.raises(ValueError):
            gaussian_logpdf(np.zeros(3), g)


class TestGaussianProduct:
    def test_two_standard_normals_hand_value(self):
        # N(x;0,1) * N(x;2,1) = w * N(x; 1, 1/2) with w = exp(-1)/(2 sqrt(pi))
        g1 = GaussianDensity([0.0], [[1.0]])
        g2 = GaussianDensity([2.0], [[1.0]])
        out = gaussian_product([g1, g2])
        assert out.component.mean[0] == pytest.approx(1.0, abs=1e-12)
        assert out.component.cov[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert out.log_weight == pytest.approx(math.log(math.exp(-1.0) / (2 * math.sqrt(math.pi))), rel=1e-12)

    def test_pointwise_identity_random(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            d = rng.integers(1, 4)
            k = rng.integers(1, 5)
            gs = []
            for _ in range(k):
                A = rng.normal(size=(d, d))
                gs.append(GaussianDensity(rng.normal(size=d), A @ A.T + 0.2 * np.eye(d)))
            prod = gaussian_product(gs)
            for _ in range(5):
                x = rng.normal(size=d)
                lhs = sum(gaussian_logpdf(x, g) for g in gs)
                rhs = prod.log_weight + gaussian_logpdf(x, prod.component)
                assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)

    def test_single_factor_identity(self):
        g = GaussianDensity([1.0, -2.0], np.diag([0.5, 3.0]))
        out = gaussian_product([g])
        assert out.log_weight == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(out.component.mean, g.mean)
        assert np.allclose(out.component.cov, g.cov)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            gaussian_product([])

    def test_mixed_dims_raise(self):
        with pytest.raises(ValueError):
            gaussian_product([GaussianDensity([0.0], [[1.0]]), GaussianDensity([0.0, 0.0], np.eye(2))])


class TestBallVolume:
    def test_l2_is_circle_area(self):
        spec = LpBallSpec(2, 0.3, 2)
        assert ball_volume(spec) == pytest.approx(math.pi * 0.3**2, rel=1e-12)

    def test_l2_1d_is_interval(self):
        assert ball_volume(LpBallSpec(2, 0.5, 1)) == pytest.approx(1.0, rel=1e-12)

    def test_linf_is_cube(self):
        spec = LpBallSpec(float("inf"), 0.25, 3)
        assert ball_volume(spec) == pytest.approx(0.5**3, rel=1e-12)

    def test_discrete_exact_match_counts_one(self):
        assert ball_volume(LpBallSpec(float("inf"), 0.0, 2, discrete=True)) == 1.0

    def test_zero_eps_continuous_rejected(self):
        with pytest.raises(ValueError):
            LpBallSpec(2, 0.0, 1, discrete=False)

    def test_bad_p_rejected(self):
        with pytest.raises(ValueError):
            LpBallSpec(3, 0.1, 1)


class TestLogSumExp:
    def test_basic(self):
        vals = [math.log(1.0), math.log(2.0), math.log(3.0)]
        assert log_sum_exp(vals) == pytest.approx(math.log(6.0), rel=1e-12)

    def test_handles_neg_inf(self):
        assert log_sum_exp([-np.inf, 0.0]) == pytest.approx(0.0, abs=1e-12)

    def test_large_offsets(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), rel=1e-12)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            log_sum_exp([])


class TestLattice:
    def test_cell_centres_1d(self):
        lat = Lattice([0.0], [1.0], [4])
        np.testing.assert_allclose(lat.axes()[0], [0.125, 0.375, 0.625, 0.875])
        assert lat.cell_volume == pytest.approx(0.25)

    def test_points_order_2d(self):
        lat = Lattice([0.0, 10.0], [1.0, 12.0], [2, 2])
        pts = lat.points()
        assert pts.shape == (4, 2)
        # C order: second coordinate varies fastest
        np.testing.assert_allclose(pts[0], [0.25, 10.5])
        np.testing.assert_allclose(pts[1], [0.25, 11.5])
        np.testing.assert_allclose(pts[2], [0.75, 10.5])

    def test_integral_of_gaussian_near_one(self):
        lat = Lattice([-8.0], [8.0], [400])
        logvals = norm.logpdf(lat.points()[:, 0]).reshape(lat.shape)
        assert lattice_integral(logvals, lat) == pytest.approx(0.0, abs=1e-6)

    def test_integral_shape_check(self):
        lat = Lattice([0.0], [1.0], [4])
        with pytest.raises(ValueError):
            lattice_integral(np.zeros(5), lat)

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            Lattice([1.0], [0.0], [4])
