"""Gaussian factor fitting and closed-form posterior assembly.

Fits a Gaussian to each factor's accepted draws by moment matching, turns
the factor product into a single weighted Gaussian, applies the
prior^(2-n) correction, and provides the matching closed-form marginal
likelihood and direct posterior sampling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import multivariate_normal

from .abc_engine import FactorSampleSet
from .core_math import (
    GaussianDensity,
    WeightedGaussian,
    gaussian_logpdf_batch,
    gaussian_product,
    regularize_cov,
)
from .models import PriorSpec


class IndefinitePrecisionError(ValueError):
    """The prior correction made the posterior precision indefinite."""


@dataclass(frozen=True)
class GaussianFactor:
    mean: np.ndarray
    cov: np.ndarray
    factor_index: int

    def density(self) -> GaussianDensity:
        return GaussianDensity(self.mean, self.cov)

    def logpdf_batch(self, thetas: np.ndarray) -> np.ndarray:
        return gaussian_logpdf_batch(thetas, self.mean, self.cov)


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray
    log_product_weight: float  # log w of the factor product
    n: int  # number of observations (factors + 1)
    prior: PriorSpec
    truncated: bool = False  # uniform-box prior: density clipped to the box
    log_truncation_mass: float = 0.0


def fit_gaussian_factor(fs: FactorSampleSet) -> GaussianFactor:
    """Moment-matched Gaussian for one factor (sample mean, covariance m-1)."""
    m, d = fs.samples.shape
    if m <= d:
        raise ValueError(f"factor {fs.factor_index}: need m > d, got m={m}, d={d}")
    mean = fs.samples.mean(axis=0)
    cov = np.atleast_2d(np.cov(fs.samples, rowvar=False))
    if np.allclose(cov, 0):
        warnings.warn(
            f"factor {fs.factor_index}: degenerate sample covariance (all accepted "
            "draws identical); jittering - m is probably too small",
            stacklevel=2,
        )
    return GaussianFactor(mean, regularize_cov(cov, f"factor {fs.factor_index} covariance"), fs.factor_index)


def product_of_factors(factors: list[GaussianFactor]) -> WeightedGaussian:
    return gaussian_product([f.density() for f in factors])


def _prior_gaussian(prior: PriorSpec) -> GaussianDensity:
    return GaussianDensity(prior.mean, np.diag(np.asarray(prior.sd) ** 2))


def _gaussian_prior_correction(
    a: np.ndarray, B: np.ndarray, prior: PriorSpec, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the prior^(2-n) correction to the product Gaussian (a, B)."""
    d = a.shape[0]
    prior_prec = np.diag(1.0 / np.asarray(prior.sd) ** 2)
    B_inv = np.linalg.inv(B)
    prec_post = (2 - n) * prior_prec + B_inv
    prec_post = 0.5 * (prec_post + prec_post.T)
    try:
        np.linalg.cholesky(prec_post)
    except np.linalg.LinAlgError as exc:
        raise IndefinitePrecisionError(
            "prior-correction made the posterior precision indefinite"
        ) from exc
    cov_post = np.linalg.inv(prec_post)
    cov_post = 0.5 * (cov_post + cov_post.T)
    mu_post = cov_post @ ((2 - n) * prior_prec @ prior.mean + B_inv @ a)
    return mu_post, cov_post


def _box_mass(mean: np.ndarray, cov: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    mvn = multivariate_normal(mean=mean, cov=cov, allow_singular=False)
    return float(mvn.cdf(upper, lower_limit=lower))


def assemble_gaussian_posterior(
    factors: list[GaussianFactor], prior: PriorSpec
) -> GaussianPosterior:
    """Combine fitted factors and the prior into the Gaussian posterior.

    With a Gaussian prior the correction is exact and closed-form.  With a
    uniform-box prior the prior^(2-n) term is constant inside the box, so
    the posterior is the product Gaussian truncated to the box; the
    reported mean/cov are the untruncated ones with a truncation flag.
    """
    if not factors:
        raise ValueError("need at least one factor")
    n = len(factors) + 1
    prod = product_of_factors(factors)
    a, B = prod.component.mean, prod.component.cov
    if prior.kind == "gaussian":
        if n == 2:
            mu_post, cov_post = a, B  # exponent 2-n vanishes
        else:
            mu_post, cov_post = _gaussian_prior_correction(a, B, prior, n)
        return GaussianPosterior(mu_post, cov_post, prod.log_weight, n, prior)
    log_mass = math.log(_box_mass(a, B, prior.lower, prior.upper))
    return GaussianPosterior(
        a, B, prod.log_weight, n, prior, truncated=True, log_truncation_mass=log_mass
    )


def posterior_log_density_batch(gp: GaussianPosterior, thetas: np.ndarray) -> np.ndarray:
    """Normalised posterior log-density at an (N, d) batch of points."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    logpdf = gaussian_logpdf_batch(thetas, gp.mean, gp.cov)
    if gp.truncated:
        inside = np.all((thetas >= gp.prior.lower) & (thetas <= gp.prior.upper), axis=1)
        logpdf = np.where(inside, logpdf - gp.log_truncation_mass, -np.inf)
    return logpdf


def log_marginal_gaussian(
    factors: list[GaussianFactor], prior: PriorSpec, ci_logs: list[float]
) -> float:
    """Factorised marginal likelihood with the Gaussian factor product.

    Gaussian prior: closed-form integral of prod(factors) * prior^(2-n).
    Uniform-box prior: the same integral with the constant prior density,
    restricted to the box.
    """
    n = len(factors) + 1
    prod = product_of_factors(factors)
    a, B = prod.component.mean, prod.component.cov
    log_w = prod.log_weight
    if prior.kind == "uniform_box":
        log_vol = prior.log_box_volume()
        log_mass = math.log(_box_mass(a, B, prior.lower, prior.upper))
        return float(np.sum(ci_logs)) + log_w + (n - 2) * log_vol + log_mass
    if n == 2:
        return float(np.sum(ci_logs)) + log_w  # single normalised factor integrates to 1
    mu_post, cov_post = _gaussian_prior_correction(a, B, prior, n)
    prior_cov = np.diag(np.asarray(prior.sd) ** 2)
    _, logdet_B = np.linalg.slogdet(B)
    _, logdet_post = np.linalg.slogdet(cov_post)
    _, logdet_pri = np.linalg.slogdet(2 * math.pi * prior_cov)
    M = prior_cov / (2 - n) + B
    M = 0.5 * (M + M.T)
    try:
        M_inv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise IndefinitePrecisionError("exponential term matrix is singular") from exc
    diff = a - prior.mean
    quad = float(diff @ M_inv @ diff)
    log_integral = log_w - 0.5 * logdet_B + 0.5 * logdet_post + (n / 2 - 1) * logdet_pri - 0.5 * quad
    return float(np.sum(ci_logs)) + log_integral


def sample_gaussian_posterior(
    gp: GaussianPosterior, count: int, rng: np.random.Generator
) -> np.ndarray:
    """IID draws from the (possibly box-truncated) Gaussian posterior."""
    if not gp.truncated:
        return rng.multivariate_normal(gp.mean, gp.cov, size=count, method="cholesky")
    if math.exp(gp.log_truncation_mass) < 1e-6:
        raise RuntimeError("truncation acceptance below 1e-6; rejection sampling refused")
    out = []
    got = 0
    while got < count:
        batch = rng.multivariate_normal(gp.mean, gp.cov, size=max(count, 1024), method="cholesky")
        inside = np.all((batch >= gp.prior.lower) & (batch <= gp.prior.upper), axis=1)
        kept = batch[inside]
        out.append(kept)
        got += kept.shape[0]
    return np.concatenate(out, axis=0)[:count]
