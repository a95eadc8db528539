"""Gaussian algebra, L^p-ball geometry and log-domain grid utilities.

Everything here is pure and operates on plain numpy arrays; parameter
vectors are 1-D float arrays of length d, covariances are d x d arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln, logsumexp


class SingularCovarianceError(ValueError):
    """Covariance could not be made positive definite."""


def regularize_cov(cov: np.ndarray, label: str = "covariance") -> np.ndarray:
    """Symmetrise and, if needed, jitter a covariance until Cholesky succeeds.

    Jitter is lam*I with lam = 1e-10 * trace/d, escalated by factors of 10.
    Degenerate sample covariances (e.g. all-equal accepted draws for a
    discrete model) land here, so a zero matrix gets an absolute floor.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{label}: expected a square matrix, got {cov.shape}")
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    base = 1e-10 * np.trace(cov) / d
    if base <= 0:
        base = 1e-12
    lam = 0.0
    for _ in range(8):
        try:
            np.linalg.cholesky(cov + lam * np.eye(d))
            return cov + lam * np.eye(d)
        except np.linalg.LinAlgError:
            lam = base if lam == 0.0 else lam * 10.0
    raise SingularCovarianceError(f"{label}: not positive definite after jitter")


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "cov", regularize_cov(np.atleast_2d(self.cov)))
        if self.mean.shape[0] != self.cov.shape[0]:
            raise ValueError("mean/cov dimension mismatch")
        if not np.all(np.isfinite(self.mean)):
            raise ValueError("non-finite mean")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class WeightedGaussian:
    log_weight: float
    component: GaussianDensity


def gaussian_logpdf(theta: np.ndarray, g: GaussianDensity) -> float:
    """Log of the d-dimensional Gaussian density at theta."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape[-1] != g.dim:
        raise ValueError("theta dimension mismatch")
    chol, lower = cho_factor(g.cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    diff = theta - g.mean
    z = cho_solve((chol, lower), np.atleast_2d(diff).T)
    quad = np.einsum("ij,ji->i", np.atleast_2d(diff), z)
    out = -0.5 * (g.dim * math.log(2 * math.pi) + logdet + quad)
    return float(out[0]) if theta.ndim == 1 else out


def gaussian_logpdf_batch(thetas: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Vectorised Gaussian log-density for an (N, d) array of points."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    chol, lower = cho_factor(cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    diff = thetas - mean
    z = cho_solve((chol, lower), diff.T)
    quad = np.einsum("ij,ji->i", diff, z)
    return -0.5 * (mean.shape[0] * math.log(2 * math.pi) + logdet + quad)


def gaussian_product(factors: list[GaussianDensity]) -> WeightedGaussian:
    """Closed-form product of Gaussian densities.

    Returns (log w, a, B) such that prod_i K(theta; mu_i, S_i)
    = w * K(theta; a, B) pointwise.  The weight exponent is computed by
    completing the square directly (sum_i mu_i' P_i mu_i - a' B^{-1} a),
    which is exact for arbitrary non-commuting covariances.
    """
    if not factors:
        raise ValueError("need at least one factor")
    d = factors[0].dim
    if any(f.dim != d for f in factors):
        raise ValueError("factors have mixed dimensions")
    precisions = []
    for idx, f in enumerate(factors):
        try:
            chol, lower = cho_factor(f.cov, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - regularised upstream
            raise SingularCovarianceError(f"factor {idx}: singular covariance") from exc
        precisions.append(cho_solve((chol, lower), np.eye(d)))
    prec_sum = np.sum(precisions, axis=0)
    try:
        chol, lower = cho_factor(regularize_cov(prec_sum, "summed precision"), lower=True)
    except SingularCovarianceError as exc:
        raise SingularCovarianceError("summed precision singular") from exc
    B = cho_solve((chol, lower), np.eye(d))
    B = 0.5 * (B + B.T)
    a = B @ np.sum([P @ f.mean for P, f in zip(precisions, factors)], axis=0)

    sign_b, logdet_b = np.linalg.slogdet(2 * math.pi * B)
    log_w = 0.5 * logdet_b
    for f in factors:
        _, logdet_q = np.linalg.slogdet(2 * math.pi * f.cov)
        log_w -= 0.5 * logdet_q
    quad = sum(float(f.mean @ P @ f.mean) for P, f in zip(precisions, factors))
    quad -= float(a @ prec_sum @ a)
    log_w -= 0.5 * quad
    return WeightedGaussian(float(log_w), GaussianDensity(a, B))


@dataclass(frozen=True)
class LpBallSpec:
    p: float  # 2 or inf
    epsilon: float
    dim_u: int
    discrete: bool = False

    def __post_init__(self):
        if self.p not in (2, float("inf")):
            raise ValueError("only p=2 and p=inf are supported")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.epsilon == 0 and not self.discrete:
            raise ValueError("epsilon=0 requires a discrete observation space")
        if self.dim_u < 1:
            raise ValueError("dim_u must be positive")


def ball_volume(spec: LpBallSpec) -> float:
    """Normalising volume V of the acceptance ball (a count when discrete)."""
    if spec.discrete:
        if spec.epsilon == 0:
            return 1.0
        raise ValueError("discrete balls with epsilon > 0 are not supported")
    u, eps = spec.dim_u, spec.epsilon
    if spec.p == 2:
        return math.pi ** (u / 2) * eps**u / math.exp(gammaln(u / 2 + 1))
    return (2.0 * eps) ** u


def log_sum_exp(values) -> float:
    """Stable log(sum(exp(values))); -inf entries drop out."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty input")
    return float(logsumexp(values))


@dataclass(frozen=True)
class Lattice:
    """Rectangular evaluation grid: cell centres of a regular partition."""

    lower: np.ndarray
    upper: np.ndarray
    points_per_dim: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        object.__setattr__(
            self, "points_per_dim", np.atleast_1d(np.asarray(self.points_per_dim, dtype=int))
        )
        if not (self.lower.shape == self.upper.shape == self.points_per_dim.shape):
            raise ValueError("lattice field shapes disagree")
        if np.any(self.upper <= self.lower):
            raise ValueError("need lower < upper componentwise")
        if np.any(self.points_per_dim < 1):
            raise ValueError("points_per_dim must be positive")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.points_per_dim)

    @property
    def cell_widths(self) -> np.ndarray:
        return (self.upper - self.lower) / self.points_per_dim

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_widths))

    def axes(self) -> list[np.ndarray]:
        """Cell-centre coordinates along each dimension."""
        return [
            self.lower[k] + (np.arange(self.points_per_dim[k]) + 0.5) * self.cell_widths[k]
            for k in range(self.dim)
        ]

    def points(self) -> np.ndarray:
        """All cell centres as an (N, d) array in C order of the grid shape."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)


def lattice_integral(logvals: np.ndarray, lat: Lattice) -> float:
    """Log of the midpoint-rule integral of exp(logvals) over the lattice."""
    logvals = np.asarray(logvals, dtype=float)
    if logvals.shape != lat.shape:
        raise ValueError(f"logvals shape {logvals.shape} != lattice shape {lat.shape}")
    return log_sum_exp(logvals.ravel()) + math.log(lat.cell_volume)
