"""Kernel-density factor estimation and log-domain lattice posterior.

The factor product is evaluated pointwise on a rectangular lattice, always
in the log domain.  The exact Gaussian-mixture expansion of the product is
available at small scale as a cross-check oracle for the lattice path.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .abc_engine import FactorSampleSet
from .core_math import (
    GaussianDensity,
    Lattice,
    WeightedGaussian,
    lattice_integral,
    log_sum_exp,
    regularize_cov,
)
from .models import PriorSpec

MIXTURE_SCALE_CAP = 100_000


def optimal_q(d: int) -> float:
    """MISE-optimal bandwidth scale for a Gaussian target density."""
    return ((d + 2) / 4.0) ** (-2.0 / (d + 4))


@dataclass(frozen=True)
class KDEFactor:
    samples: np.ndarray  # (m, d)
    bandwidth: np.ndarray  # H = q * m^(-2/(d+4)) * Q
    q_used: float
    factor_index: int

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def logpdf_batch(self, thetas: np.ndarray) -> np.ndarray:
        return kde_logpdf_batch(self, thetas)


def fit_kde_factor(fs: FactorSampleSet, q: float | str = "auto") -> KDEFactor:
    """Gaussian-kernel KDE with bandwidth proportional to the sample covariance."""
    m, d = fs.samples.shape
    if m <= d:
        raise ValueError(f"factor {fs.factor_index}: need m > d, got m={m}, d={d}")
    if q == "auto":
        q_val = optimal_q(d)
    else:
        q_val = float(q)
        if q_val <= 0:
            raise ValueError("q must be positive")
    cov = regularize_cov(np.atleast_2d(np.cov(fs.samples, rowvar=False)))
    H = q_val * m ** (-2.0 / (d + 4)) * cov
    return KDEFactor(fs.samples, H, q_val, fs.factor_index)


@njit(parallel=True, cache=True)
def _whitened_lse(Z, S):  # pragma: no cover - exercised via kde_logpdf_batch
    """logsumexp_j(-0.5 ||z_i - s_j||^2) with an online max shift.

    Terms more than 45 nats below the running max are dropped; that is a
    relative error below 1e-16 even for m in the millions.
    """
    N, d = Z.shape
    m = S.shape[0]
    out = np.empty(N)
    for i in prange(N):
        mx = -1e308
        acc = 0.0
        for j in range(m):
            q = 0.0
            for k in range(d):
                diff = Z[i, k] - S[j, k]
                q += diff * diff
            v = -0.5 * q
            if v > mx:
                acc = acc * np.exp(mx - v) + 1.0
                mx = v
            elif v > mx - 45.0:
                acc += np.exp(v - mx)
        out[i] = mx + np.log(acc)
    return out


def kde_logpdf_batch(f: KDEFactor, thetas: np.ndarray) -> np.ndarray:
    """Log KDE density at an (N, d) batch of points.

    Points and samples are whitened by the bandwidth Cholesky factor so the
    kernel sum reduces to squared Euclidean distances.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != f.dim:
        raise ValueError("theta dimension mismatch")
    chol, _ = cho_factor(f.bandwidth, lower=True)
    L = np.tril(chol)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Z = solve_triangular(L, thetas.T, lower=True).T
    S = solve_triangular(L, f.samples.T, lower=True).T
    const = -0.5 * (f.dim * math.log(2 * math.pi) + logdet) - math.log(f.m)
    return _whitened_lse(np.ascontiguousarray(Z), np.ascontiguousarray(S)) + const


def kde_logpdf(f: KDEFactor, theta: np.ndarray) -> float:
    return float(kde_logpdf_batch(f, np.atleast_2d(theta))[0])


@dataclass(frozen=True)
class LatticePosterior:
    lattice: Lattice
    log_density: np.ndarray  # grid shape, normalised (lattice integral = 0)
    log_normaliser: float  # log integral of the unnormalised g(theta)

    def __post_init__(self):
        if self.log_density.shape != self.lattice.shape:
            raise ValueError("log_density shape does not match lattice")

    def cell_masses(self) -> np.ndarray:
        """Flat array of per-cell probability masses (sums to ~1)."""
        flat = self.log_density.ravel()
        mx = np.max(flat)
        p = np.exp(flat - mx)
        return p / np.sum(p)

    def mean(self) -> np.ndarray:
        pts = self.lattice.points()
        return self.cell_masses() @ pts

    def mode(self) -> np.ndarray:
        idx = int(np.argmax(self.log_density.ravel()))
        return self.lattice.points()[idx]

    def marginal(self, dims: tuple[int, ...]) -> np.ndarray:
        """Probability masses marginalised onto the given dimensions."""
        other = tuple(k for k in range(self.lattice.dim) if k not in dims)
        p = self.cell_masses().reshape(self.lattice.shape)
        marg = p.sum(axis=other) if other else p
        order = np.argsort(np.argsort(dims))
        return np.transpose(marg, axes=order) if len(dims) > 1 else marg


def default_lattice(
    factor_means: np.ndarray,
    factor_sds: np.ndarray,
    prior: PriorSpec,
    points_per_dim: int | None = None,
    pad_sds: float = 6.0,
) -> Lattice:
    """Bounds covering every factor's high-density region, clipped to a
    uniform prior's box when one is in play."""
    factor_means = np.atleast_2d(factor_means)
    factor_sds = np.atleast_2d(factor_sds)
    d = factor_means.shape[1]
    if d > 3:
        raise ValueError("lattice assembly supports d <= 3 only")
    pad = pad_sds * factor_sds.max(axis=0)
    lower = factor_means.min(axis=0) - pad
    upper = factor_means.max(axis=0) + pad
    if prior.kind == "uniform_box":
        lower = np.maximum(lower, prior.lower)
        upper = np.minimum(upper, prior.upper)
    if points_per_dim is None:
        points_per_dim = 400 if d <= 2 else 120
    return Lattice(lower, upper, np.full(d, points_per_dim))


def refined_lattice(
    factors,
    prior: PriorSpec,
    coarse: Lattice,
    points_per_dim: int | None = None,
    log_drop: float = 25.0,
) -> Lattice:
    """Coarse-to-fine lattice placement.

    Evaluates the posterior on the coarse lattice, keeps the cells within
    log_drop nats of the peak, and returns a fine lattice over that region
    (padded by one coarse cell).  Wide factor spreads otherwise force a
    lattice far coarser than the concentrated factor product.
    """
    lp = assemble_lattice_posterior(factors, prior, coarse)
    pts = coarse.points()
    keep = lp.log_density.ravel() > lp.log_density.max() - log_drop
    width = coarse.cell_widths
    lower = pts[keep].min(axis=0) - width
    upper = pts[keep].max(axis=0) + width
    if prior.kind == "uniform_box":
        lower = np.maximum(lower, prior.lower)
        upper = np.minimum(upper, prior.upper)
    if points_per_dim is None:
        points_per_dim = 400 if coarse.dim <= 2 else 120
    return Lattice(lower, upper, np.full(coarse.dim, points_per_dim))


def assemble_lattice_posterior(factors, prior: PriorSpec, lattice: Lattice) -> LatticePosterior:
    """Evaluate log g = sum_i log phi_i + (2-n) log prior on the lattice and
    normalise by the midpoint-rule integral.

    Accepts any factor objects exposing logpdf_batch (KDE or Gaussian).
    """
    n = len(factors) + 1
    pts = lattice.points()
    log_prior = prior.logpdf_batch(pts)
    if np.any(~np.isfinite(log_prior)):
        raise ValueError("prior is zero at a lattice point; clip the lattice to the prior box")
    log_g = (2 - n) * log_prior
    for f in factors:
        log_g = log_g + f.logpdf_batch(pts)
    log_g = log_g.reshape(lattice.shape)
    log_norm = lattice_integral(log_g, lattice)
    if not np.isfinite(log_norm):
        raise ValueError("posterior mass escaped the lattice (normaliser is -inf)")
    return LatticePosterior(lattice, log_g - log_norm, log_norm)


@dataclass(frozen=True)
class MixtureProduct:
    """Exact Gaussian-mixture expansion of the KDE factor product.

    All components share the covariance (the bandwidths are fixed per
    factor), so only weights and means vary across index tuples.
    log_weights/means describe the raw product; the _post variants carry
    the Gaussian-prior correction, and log_sum_wpost is the log of the
    integral of the product against prior^(2-n).
    """

    log_weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, d)
    cov: np.ndarray  # shared B
    log_weights_post: np.ndarray
    means_post: np.ndarray
    cov_post: np.ndarray
    log_sum_wpost: float

    def components(self) -> list[WeightedGaussian]:
        return [
            WeightedGaussian(float(lw), GaussianDensity(mu, self.cov_post))
            for lw, mu in zip(self.log_weights_post, self.means_post)
        ]

    def posterior_logpdf_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Normalised mixture posterior log-density."""
        from .core_math import gaussian_logpdf_batch

        thetas = np.atleast_2d(thetas)
        comps = np.stack(
            [gaussian_logpdf_batch(thetas, mu, self.cov_post) for mu in self.means_post]
        )  # (M, N)
        logw = self.log_weights_post[:, None] - self.log_sum_wpost
        terms = logw + comps
        mx = np.max(terms, axis=0)
        return mx + np.log(np.sum(np.exp(terms - mx[None, :]), axis=0))

    def product_logpdf_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Unnormalised log of the raw factor product (no prior correction)."""
        from .core_math import gaussian_logpdf_batch

        thetas = np.atleast_2d(thetas)
        comps = np.stack([gaussian_logpdf_batch(thetas, mu, self.cov) for mu in self.means])
        terms = self.log_weights[:, None] + comps
        mx = np.max(terms, axis=0)
        return mx + np.log(np.sum(np.exp(terms - mx[None, :]), axis=0))


def mixture_product_exact(factors: list[KDEFactor], prior: PriorSpec) -> MixtureProduct:
    """Enumerate all m^(n-1) mixture components of the KDE factor product.

    Small-scale oracle only; refuses beyond MIXTURE_SCALE_CAP components.
    Requires a Gaussian prior (the lattice path covers everything else).
    """
    if prior.kind != "gaussian":
        raise ValueError("mixture oracle supports Gaussian priors only")
    n = len(factors) + 1
    d = factors[0].dim
    m = factors[0].m
    if any(f.m != m or f.dim != d for f in factors):
        raise ValueError("factors must share m and d")
    n_components = m ** (n - 1)
    if n_components > MIXTURE_SCALE_CAP:
        raise ValueError(f"{n_components} components exceed the scale cap {MIXTURE_SCALE_CAP}")

    H_invs = [np.linalg.inv(f.bandwidth) for f in factors]
    prec_sum = regularize_cov(np.sum(H_invs, axis=0), "summed bandwidth precision")
    B = np.linalg.inv(prec_sum)
    B = 0.5 * (B + B.T)
    _, logdet_B = np.linalg.slogdet(2 * math.pi * B)
    log_const = (1 - n) * math.log(m) + 0.5 * logdet_B
    for f in factors:
        _, logdet_H = np.linalg.slogdet(2 * math.pi * f.bandwidth)
        log_const -= 0.5 * logdet_H

    # per-component weight exponent by completing the square:
    # sum_i p_i' H_i^{-1} p_i - mean' B^{-1} mean (exact for any H_i)
    log_weights = np.empty(n_components)
    means = np.empty((n_components, d))
    for idx, tup in enumerate(itertools.product(range(m), repeat=n - 1)):
        pts = [factors[i].samples[j] for i, j in enumerate(tup)]
        us = [H_invs[i] @ p for i, p in enumerate(pts)]
        mean = B @ np.sum(us, axis=0)
        quad = sum(float(p @ u) for p, u in zip(pts, us)) - float(mean @ prec_sum @ mean)
        log_weights[idx] = log_const - 0.5 * quad
        means[idx] = mean

    if n == 2:
        # exponent 2-n vanishes: the prior drops out of the correction
        log_weights_post = log_weights.copy()
        means_post = means.copy()
        cov_post = B.copy()
    else:
        prior_cov = np.diag(np.asarray(prior.sd) ** 2)
        prior_prec = np.diag(1.0 / np.asarray(prior.sd) ** 2)
        B_inv = np.linalg.inv(B)
        prec_post = (2 - n) * prior_prec + B_inv
        prec_post = 0.5 * (prec_post + prec_post.T)
        np.linalg.cholesky(prec_post)  # raises if indefinite
        cov_post = np.linalg.inv(prec_post)
        cov_post = 0.5 * (cov_post + cov_post.T)
        _, logdet_Bu = np.linalg.slogdet(B)
        _, logdet_post = np.linalg.slogdet(cov_post)
        _, logdet_pri = np.linalg.slogdet(2 * math.pi * prior_cov)
        M = prior_cov / (2 - n) + B
        M_inv = np.linalg.inv(0.5 * (M + M.T))
        diffs = means - prior.mean
        quad = np.einsum("ij,jk,ik->i", diffs, M_inv, diffs)
        log_weights_post = (
            log_weights - 0.5 * logdet_Bu + 0.5 * logdet_post + (n / 2 - 1) * logdet_pri - 0.5 * quad
        )
        means_post = (cov_post @ ((2 - n) * prior_prec @ prior.mean)[:, None]).T + (
            cov_post @ B_inv @ means.T
        ).T
    return MixtureProduct(
        log_weights,
        means,
        B,
        log_weights_post,
        means_post,
        cov_post,
        log_sum_exp(log_weights_post),
    )


def log_marginal_kde(lp: LatticePosterior, ci_logs: list[float]) -> float:
    """Factorised marginal likelihood: sum(log c_i) + log lattice normaliser."""
    return float(np.sum(ci_logs)) + lp.log_normaliser


def sample_lattice_posterior(
    lp: LatticePosterior, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Categorical draw over cells by mass, then uniform jitter in the cell."""
    p = lp.cell_masses()
    idx = rng.choice(p.shape[0], size=count, p=p)
    pts = lp.lattice.points()[idx]
    jitter = rng.uniform(-0.5, 0.5, size=pts.shape) * lp.lattice.cell_widths
    return pts + jitter
