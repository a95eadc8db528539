"""Ground truth: exact lattice posteriors, tiny-scale EBC, and divergences.

Only models with a tractable transition density (binomial, CIR, INAR(1))
are supported here; everything is computed by quadrature of the exact
likelihood on a lattice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import Lattice, lattice_integral
from .kde_estimator import LatticePosterior
from .models import (
    Dataset,
    ModelSpec,
    PriorSpec,
    exact_transition_logpdf_batch,
    sample_prior,
    simulate_transition_batch,
)

_EXACT_MODELS = ("binomial", "cir", "inar1")
CIR_ORACLE_REL_TOL = 1e-18  # stricter series truncation than the models module


class EBCCapError(RuntimeError):
    """EBC exhausted its draw budget (expected for realistic n)."""

    def __init__(self, accepted: int, draws: int):
        self.accepted = accepted
        self.draws = draws
        super().__init__(f"EBC capped out: {accepted} acceptances in {draws} draws")


@dataclass(frozen=True)
class OracleResult:
    posterior: LatticePosterior
    log_marginal_true: float
    model_id: str


def exact_loglik_batch(
    model: ModelSpec, thetas: np.ndarray, data: Dataset, include_first: bool = False
) -> np.ndarray:
    """Sum of exact transition log-densities over the dataset.

    include_first is unsupported (the stationary density is not modelled);
    the flag exists so callers state the convention explicitly.
    """
    if include_first:
        raise NotImplementedError("the first-observation term is always excluded")
    thetas = np.atleast_2d(thetas)
    total = np.zeros(thetas.shape[0])
    for _, prev, obs in data.pairs():
        total += exact_transition_logpdf_batch(
            model, thetas, prev.state, obs.state, obs.time - prev.time, cir_rel_tol=CIR_ORACLE_REL_TOL
        )
    return total


def exact_posterior_lattice(
    model: ModelSpec,
    prior: PriorSpec,
    data: Dataset,
    lattice: Lattice,
    include_first: bool = False,
) -> OracleResult:
    """Exact posterior and log marginal likelihood by lattice quadrature."""
    if model.model_id not in _EXACT_MODELS:
        raise ValueError(f"no exact likelihood for model {model.model_id!r}")
    pts = lattice.points()
    log_post = exact_loglik_batch(model, pts, data, include_first) + prior.logpdf_batch(pts)
    log_post = log_post.reshape(lattice.shape)
    log_marginal = lattice_integral(log_post, lattice)
    posterior = LatticePosterior(lattice, log_post - log_marginal, log_marginal)
    return OracleResult(posterior, float(log_marginal), model.model_id)


def ebc_sample(
    model: ModelSpec,
    prior: PriorSpec,
    data: Dataset,
    m: int,
    cap: int,
    rng: np.random.Generator,
    batch: int = 4096,
) -> np.ndarray:
    """Full-dataset exact-match rejection sampling (discrete models only).

    A draw is accepted iff every simulated transition reproduces the
    observed state exactly, which is equivalent to an exact whole-dataset
    match given the fixed first observation.
    """
    if not model.discrete:
        raise ValueError("EBC requires a discrete state space")
    accepted = []
    n_accepted = 0
    draws = 0
    while n_accepted < m:
        if draws >= cap:
            raise EBCCapError(n_accepted, draws)
        b = min(batch, cap - draws)
        thetas = sample_prior(prior, rng, size=b)
        alive = np.ones(b, dtype=bool)
        for _, prev, obs in data.pairs():
            if not np.any(alive):
                break
            sim = simulate_transition_batch(model, thetas, prev.state, obs.time - prev.time, rng)
            alive &= np.all(sim == obs.state, axis=1)
        hits = thetas[alive]
        if hits.size:
            accepted.append(hits)
            n_accepted += hits.shape[0]
        draws += b
    return np.concatenate(accepted, axis=0)[:m]


def divergence(p: LatticePosterior, q: LatticePosterior) -> dict[str, float]:
    """Total variation and KL(p || q) between lattice posteriors."""
    if p.lattice.shape != q.lattice.shape or not (
        np.allclose(p.lattice.lower, q.lattice.lower)
        and np.allclose(p.lattice.upper, q.lattice.upper)
    ):
        raise ValueError("lattices differ; divergences need identical grids")
    vol = p.lattice.cell_volume
    dens_p = np.exp(p.log_density.ravel())
    dens_q = np.exp(q.log_density.ravel())
    tv = 0.5 * float(np.sum(np.abs(dens_p - dens_q))) * vol
    mask = dens_p > 0
    kl_terms = dens_p[mask] * (p.log_density.ravel()[mask] - q.log_density.ravel()[mask])
    kl = float(np.sum(kl_terms)) * vol
    return {"tv": tv, "kl": kl}
