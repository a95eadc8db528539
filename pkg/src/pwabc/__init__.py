"""Piecewise ABC inference for discretely observed Markov models."""

__version__ = "0.1.0"

from .abc_engine import ABCConfig, FactorSampleSet, RunReport, estimate_ci, sample_all_factors, sample_factor
from .core_math import GaussianDensity, Lattice, LpBallSpec, WeightedGaussian, ball_volume, gaussian_logpdf, gaussian_product, lattice_integral, log_sum_exp
from .gaussian_estimator import GaussianFactor, GaussianPosterior, assemble_gaussian_posterior, fit_gaussian_factor, log_marginal_gaussian, sample_gaussian_posterior
from .kde_estimator import KDEFactor, LatticePosterior, MixtureProduct, assemble_lattice_posterior, fit_kde_factor, kde_logpdf, log_marginal_kde, mixture_product_exact, sample_lattice_posterior
from .models import Dataset, ModelSpec, Observation, PriorSpec, make_model, sample_prior, simulate_dataset, simulate_transition, stream
from .oracle import OracleResult, divergence, ebc_sample, exact_posterior_lattice
