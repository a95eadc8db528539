"""Unit tests for the exact-likelihood oracles and divergences."""

import math

import numpy as np
import pytest
from scipy.stats import binom, norm

from pwabc.core_math import Lattice
from pwabc.models import Dataset, PriorSpec, make_model, simulate_dataset, stream, to_inference_scale
from pwabc.oracle import (
    EBCCapError,
    divergence,
    ebc_sample,
    exact_loglik_batch,
    exact_posterior_lattice,
)
from pwabc.kde_estimator import LatticePosterior


def _binom_dataset(values):
    times = np.arange(len(values), dtype=float)
    return Dataset(times, np.array(values, dtype=float)[:, None], "binomial")


class TestExactLoglik:
    def test_binomial_sum_excludes_first(self):
        model = make_model("binomial")
        ds = _binom_dataset([55, 60, 58])
        theta = np.array([[0.3]])
        from scipy.special import expit

        # first observation carries no likelihood term
        ref = binom.logpmf(60, 100, expit(0.3)) + binom.logpmf(58, 100, expit(0.3))
        assert exact_loglik_batch(model, theta, ds)[0] == pytest.approx(ref, rel=1e-10)

    def test_include_first_unsupported(self):
        model = make_model("binomial")
        ds = _binom_dataset([55, 60])
        with pytest.raises(NotImplementedError):
            exact_loglik_batch(model, np.zeros((1, 1)), ds, include_first=True)


class TestExactPosteriorLattice:
    def test_binomial_posterior_matches_conjugate_shape(self):
        # flat-ish prior: lattice posterior tracks the binomial likelihood
        model = make_model("binomial")
        prior = PriorSpec("gaussian", mean=[0.0], sd=[10.0])
        ds = _binom_dataset([60, 60, 60])
        lat = Lattice([-1.0], [2.0], [1500])
        res = exact_posterior_lattice(model, prior, ds, lat)
        # two observations of 60/100 -> mode near logit(0.6)
        assert res.posterior.mode()[0] == pytest.approx(math.log(0.6 / 0.4), abs=0.02)

    def test_normalised(self):
        model = make_model("binomial")
        prior = PriorSpec("gaussian", mean=[0.0], sd=[2.0])
        ds = _binom_dataset([55, 60])
        lat = Lattice([-3.0], [3.0], [800])
        res = exact_posterior_lattice(model, prior, ds, lat)
        from pwabc.core_math import lattice_integral

        assert lattice_integral(res.posterior.log_density, lat) == pytest.approx(0.0, abs=1e-10)

    def test_lv_rejected(self):
        model = make_model("lv")
        prior = PriorSpec("gaussian", mean=[0.0] * 3, sd=[1.0] * 3)
        ds = Dataset(np.array([0.0, 1.0]), np.array([[50.0, 100.0], [60.0, 90.0]]), "lv")
        with pytest.raises(ValueError):
            exact_posterior_lattice(model, prior, ds, Lattice([0.0] * 3, [1.0] * 3, [4] * 3))


class TestEBC:
    def test_succeeds_tiny_case(self):
        model = make_model("binomial")
        prior = PriorSpec("gaussian", mean=[0.0], sd=[1.0])
        ds = _binom_dataset([50, 55])
        draws = ebc_sample(model, prior, ds, m=200, cap=2_000_000, rng=stream(0))
        assert draws.shape == (200, 1)

    def test_cap_error_carries_counts(self):
        model = make_model("binomial")
        prior = PriorSpec("gaussian", mean=[-8.0], sd=[0.1])
        ds = _binom_dataset([50, 55])
        with pytest.raises(EBCCapError) as err:
            ebc_sample(model, prior, ds, m=100, cap=10000, rng=stream(1))
        assert err.value.draws == 10000

    def test_continuous_model_rejected(self):
        model = make_model("cir")
        prior = PriorSpec("gaussian", mean=[0.0], sd=[1.0])
        ds = Dataset(np.array([0.0, 0.5]), np.array([[1.0], [1.1]]), "cir")
        with pytest.raises(ValueError):
            ebc_sample(model, prior, ds, m=10, cap=1000, rng=stream(2))


class TestDivergence:
    def _lp(self, loc, scale):
        lat = Lattice([-8.0], [8.0], [3200])
        logd = norm.logpdf(lat.points()[:, 0], loc, scale).reshape(lat.shape)
        return LatticePosterior(lat, logd, 0.0)

    def test_identical_is_zero(self):
        p = self._lp(0.0, 1.0)
        div = divergence(p, p)
        assert div["tv"] == pytest.approx(0.0, abs=1e-12)
        assert div["kl"] == pytest.approx(0.0, abs=1e-12)

    def test_tv_of_shifted_gaussians(self):
        # TV(N(0,1), N(mu,1)) = 2*Phi(|mu|/2) - 1
        p, q = self._lp(0.0, 1.0), self._lp(1.0, 1.0)
        expected = 2 * norm.cdf(0.5) - 1
        assert divergence(p, q)["tv"] == pytest.approx(expected, abs=1e-4)

    def test_kl_closed_form(self):
        # KL(N(0,1) || N(1,1)) = 0.5
        p, q = self._lp(0.0, 1.0), self._lp(1.0, 1.0)
        assert divergence(p, q)["kl"] == pytest.approx(0.5, abs=1e-4)

    def test_mismatched_lattices_rejected(self):
        p = self._lp(0.0, 1.0)
        lat = Lattice([-4.0], [4.0], [3200])
        q = LatticePosterior(lat, norm.logpdf(lat.points()[:, 0]).reshape(lat.shape), 0.0)
        with pytest.raises(ValueError):
            divergence(p, q)
