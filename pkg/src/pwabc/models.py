"""Markov model abstraction and the four concrete models.

Each model provides a one-step transition simulator on the natural scale,
driven by parameters given on the transformed inference scale, plus an
exact transition log-density where one is available (binomial, CIR,
INAR(1)).  The Lotka-Volterra model is simulation-only by design.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy.special import expit, gammaln, logit

from .core_math import log_sum_exp

SUPPORTED_MODELS = ("binomial", "cir", "inar1", "lv")
LV_POPULATION_CAP = 1_000_000


def stream(seed: int, *key: int) -> np.random.Generator:
    """Reproducible RNG stream keyed by (seed, *key), independent of callers."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


# ---------------------------------------------------------------------------
# Parameter transforms (natural <-> inference scale)

_FWD = {"logit": logit, "log": np.log, "identity": lambda x: x}
_INV = {"logit": expit, "log": np.exp, "identity": lambda x: x}


def to_inference_scale(natural: np.ndarray, transform: tuple[str, ...]) -> np.ndarray:
    natural = np.atleast_1d(np.asarray(natural, dtype=float))
    return np.array([_FWD[t](v) for t, v in zip(transform, natural, strict=True)])


def to_natural_scale(theta: np.ndarray, transform: tuple[str, ...]) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.array([_INV[t](v) for t, v in zip(transform, theta, strict=True)])


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Observation:
    time: float
    state: np.ndarray


@dataclass(frozen=True)
class Dataset:
    times: np.ndarray  # (n,), strictly increasing
    states: np.ndarray  # (n, u)
    model_id: str

    def __post_init__(self):
        object.__setattr__(self, "times", np.atleast_1d(np.asarray(self.times, dtype=float)))
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "states", states)
        if self.times.shape[0] != self.states.shape[0]:
            raise ValueError("times/states length mismatch")
        if self.times.shape[0] < 2:
            raise ValueError("need at least two observations")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def u(self) -> int:
        return self.states.shape[1]

    def observation(self, i: int) -> Observation:
        return Observation(float(self.times[i]), self.states[i])

    def pairs(self):
        """Consecutive (x_{i-1}, x_i) pairs with their times, i = 2..n."""
        for i in range(1, self.n):
            yield i + 1, self.observation(i - 1), self.observation(i)


@dataclass(frozen=True)
class PriorSpec:
    kind: str  # "gaussian" | "uniform_box"
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "gaussian":
            mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
            sd = np.atleast_1d(np.asarray(self.sd, dtype=float))
            if mean.shape != sd.shape or np.any(sd <= 0):
                raise ValueError("gaussian prior needs matching mean/sd with sd > 0")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "sd", sd)
        elif self.kind == "uniform_box":
            lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
            upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lower.shape != upper.shape or np.any(lower >= upper):
                raise ValueError("uniform prior needs lower < upper")
            object.__setattr__(self, "lower", lower)
            object.__setattr__(self, "upper", upper)
        else:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return (self.mean if self.kind == "gaussian" else self.lower).shape[0]

    def logpdf_batch(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if self.kind == "gaussian":
            z = (thetas - self.mean) / self.sd
            return -0.5 * np.sum(z * z, axis=1) - np.sum(
                np.log(self.sd) + 0.5 * math.log(2 * math.pi)
            )
        inside = np.all((thetas >= self.lower) & (thetas <= self.upper), axis=1)
        out = np.full(thetas.shape[0], -np.inf)
        out[inside] = -float(np.sum(np.log(self.upper - self.lower)))
        return out

    def logpdf(self, theta: np.ndarray) -> float:
        return float(self.logpdf_batch(np.atleast_2d(theta))[0])

    def log_box_volume(self) -> float:
        if self.kind != "uniform_box":
            raise ValueError("not a uniform prior")
        return float(np.sum(np.log(self.upper - self.lower)))


def sample_prior(prior: PriorSpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from the prior on the inference scale; (size, d) when size given."""
    n = 1 if size is None else size
    if prior.kind == "gaussian":
        draws = rng.normal(prior.mean, prior.sd, size=(n, prior.dim))
    else:
        draws = rng.uniform(prior.lower, prior.upper, size=(n, prior.dim))
    return draws[0] if size is None else draws


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    params: dict = field(default_factory=dict)  # fixed (non-inferred) parameters
    transform: tuple[str, ...] = ()
    u: int = 1
    discrete: bool = True

    def __post_init__(self):
        if self.model_id not in SUPPORTED_MODELS:
            raise ValueError(f"unknown model {self.model_id!r}")


def make_model(model_id: str, params: dict | None = None) -> ModelSpec:
    params = dict(params or {})
    if model_id == "binomial":
        params.setdefault("k", 100)
        return ModelSpec("binomial", params, ("logit",), u=1, discrete=True)
    if model_id == "cir":
        params.setdefault("a", 0.5)
        params.setdefault("sigma", 0.15)
        return ModelSpec("cir", params, ("log",), u=1, discrete=False)
    if model_id == "inar1":
        return ModelSpec("inar1", params, ("logit", "log"), u=1, discrete=True)
    if model_id == "lv":
        params.setdefault("cap", LV_POPULATION_CAP)
        return ModelSpec("lv", params, ("log", "log", "log"), u=2, discrete=True)
    raise ValueError(f"unknown model {model_id!r}")


# ---------------------------------------------------------------------------
# Lotka-Volterra Gillespie kernel (prey birth, predation, predator death)


@njit(cache=True)
def _lv_gillespie_batch(y1_0, y2_0, r1, r2, r3, dt, cap, seeds, out):  # pragma: no cover
    for b in range(seeds.shape[0]):
        np.random.seed(seeds[b])
        y1 = y1_0
        y2 = y2_0
        t = 0.0
        ok = True
        while True:
            h1 = r1[b] * y1
            h2 = r2[b] * y1 * y2
            h3 = r3[b] * y2
            h = h1 + h2 + h3
            if h <= 0.0:
                break
            t += np.random.exponential(1.0 / h)
            if t > dt:
                break
            u = np.random.random() * h
            if u < h1:
                y1 += 1
            elif u < h1 + h2:
                y1 -= 1
                y2 += 1
            else:
                y2 -= 1
            if y1 > cap or y2 > cap:
                ok = False
                break
        if ok:
            out[b, 0] = y1
            out[b, 1] = y2
        else:
            out[b, 0] = -1
            out[b, 1] = -1


# ---------------------------------------------------------------------------
# Transition simulation


def simulate_transition_batch(
    model: ModelSpec,
    thetas: np.ndarray,
    x_prev: np.ndarray,
    dt: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One transition draw per row of thetas, started from x_prev.

    Returns a (B, u) array on the natural state scale.  Lotka-Volterra
    trajectories that exceed the population cap return (-1, -1); callers
    treat them as rejected draws.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
    B = thetas.shape[0]
    if model.model_id == "binomial":
        p = expit(thetas[:, 0])
        return rng.binomial(int(model.params["k"]), p).astype(float)[:, None]
    if model.model_id == "cir":
        if dt <= 0:
            raise ValueError("need dt > 0")
        x0 = float(x_prev[0])
        if x0 <= 0:
            raise ValueError("CIR state must be positive")
        a, sig = float(model.params["a"]), float(model.params["sigma"])
        b = np.exp(thetas[:, 0])
        c = 2 * a / (sig**2 * (1 - math.exp(-a * dt)))
        nc = 2 * c * x0 * math.exp(-a * dt)
        df = 4 * a * b / sig**2
        npois = rng.poisson(nc / 2, size=B)
        y = rng.gamma(shape=df / 2 + npois, scale=2.0)
        return (y / (2 * c))[:, None]
    if model.model_id == "inar1":
        w = int(round(float(x_prev[0])))
        alpha = expit(thetas[:, 0])
        lam = np.exp(thetas[:, 1])
        survivors = rng.binomial(w, alpha) if w > 0 else np.zeros(B, dtype=int)
        return (survivors + rng.poisson(lam, size=B)).astype(float)[:, None]
    if model.model_id == "lv":
        if dt <= 0:
            raise ValueError("need dt > 0")
        rates = np.exp(thetas)
        seeds = rng.integers(1, 2**31 - 1, size=B).astype(np.int64)
        out = np.empty((B, 2), dtype=np.int64)
        _lv_gillespie_batch(
            np.int64(round(float(x_prev[0]))),
            np.int64(round(float(x_prev[1]))),
            np.ascontiguousarray(rates[:, 0]),
            np.ascontiguousarray(rates[:, 1]),
            np.ascontiguousarray(rates[:, 2]),
            float(dt),
            np.int64(model.params["cap"]),
            seeds,
            out,
        )
        return out.astype(float)
    raise ValueError(f"unknown model {model.model_id!r}")


def simulate_transition(
    model: ModelSpec,
    theta: np.ndarray,
    from_obs: Observation,
    to_time: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Single exact draw from the one-step transition law."""
    dt = to_time - from_obs.time
    if model.model_id not in ("binomial",) and dt <= 0:
        raise ValueError("to_time must exceed the source observation time")
    return simulate_transition_batch(model, np.atleast_2d(theta), from_obs.state, dt, rng)[0]


# ---------------------------------------------------------------------------
# Exact transition log-densities (binomial, CIR, INAR(1))


def _check_integer_state(x: float, what: str) -> int:
    xi = int(round(x))
    if abs(x - xi) > 1e-9 or xi < 0:
        raise ValueError(f"{what}: expected a nonnegative integer state, got {x}")
    return xi


def _cir_logpdf_batch(
    thetas: np.ndarray, x0: float, x1: float, dt: float, a: float, sig: float, rel_tol: float
) -> np.ndarray:
    """Non-central chi-square transition density as a Poisson-gamma series.

    The series over the Poisson mixing index is truncated once the summed
    range covers all terms above rel_tol relative to the largest.
    """
    if x0 <= 0 or x1 <= 0:
        return np.full(thetas.shape[0], -np.inf)
    b = np.exp(thetas[:, 0])
    c = 2 * a / (sig**2 * (1 - math.exp(-a * dt)))
    lam = c * x0 * math.exp(-a * dt)  # Poisson mean (= nc/2)
    df = 4 * a * b / sig**2
    z = 2 * c * x1
    halfwidth = 40.0 * math.sqrt(lam + 1.0) + 25.0 - math.log10(rel_tol)
    kmax = int(lam + halfwidth)
    k = np.arange(0, kmax + 1)
    log_pois = k * math.log(lam) - lam - gammaln(k + 1) if lam > 0 else np.where(k == 0, 0.0, -np.inf)
    shape = df[:, None] / 2 + k[None, :]
    log_chi2 = (shape - 1) * math.log(z) - z / 2 - shape * math.log(2.0) - gammaln(shape)
    terms = log_pois[None, :] + log_chi2
    mx = np.max(terms, axis=1, keepdims=True)
    return math.log(2 * c) + (mx[:, 0] + np.log(np.sum(np.exp(terms - mx), axis=1)))


def exact_transition_logpdf_batch(
    model: ModelSpec,
    thetas: np.ndarray,
    x_prev: np.ndarray,
    x_next: np.ndarray,
    dt: float,
    cir_rel_tol: float = 1e-16,
) -> np.ndarray:
    """Exact one-step log-density at each row of thetas."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    x_prev = np.atleast_1d(np.asarray(x_prev, dtype=float))
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    if model.model_id == "binomial":
        k = int(model.params["k"])
        x = _check_integer_state(x_next[0], "binomial observation")
        if x > k:
            return np.full(thetas.shape[0], -np.inf)
        t = thetas[:, 0]
        # log C(k,x) + x*log p + (k-x)*log(1-p) with p = expit(t), stably in t
        log_comb = gammaln(k + 1) - gammaln(x + 1) - gammaln(k - x + 1)
        return log_comb + x * t - k * np.logaddexp(0.0, t)
    if model.model_id == "cir":
        return _cir_logpdf_batch(
            thetas,
            float(x_prev[0]),
            float(x_next[0]),
            dt,
            float(model.params["a"]),
            float(model.params["sigma"]),
            cir_rel_tol,
        )
    if model.model_id == "inar1":
        w = _check_integer_state(x_prev[0], "INAR state")
        x = _check_integer_state(x_next[0], "INAR state")
        t1, t2 = thetas[:, 0], thetas[:, 1]
        lam = np.exp(t2)
        kmax = min(w, x)
        k = np.arange(0, kmax + 1)
        # binomial thinning pmf in terms of t1 = logit(alpha)
        log_binom = (
            gammaln(w + 1)
            - gammaln(k + 1)
            - gammaln(w - k + 1)
            + k[None, :] * t1[:, None]
            - w * np.logaddexp(0.0, t1)[:, None]
        )
        log_pois = (x - k)[None, :] * t2[:, None] - lam[:, None] - gammaln(x - k + 1)[None, :]
        terms = log_binom + log_pois
        mx = np.max(terms, axis=1)
        return mx + np.log(np.sum(np.exp(terms - mx[:, None]), axis=1))
    raise ValueError(f"no exact transition density for model {model.model_id!r}")


def exact_transition_logpdf(
    model: ModelSpec,
    theta: np.ndarray,
    from_obs: Observation,
    to_obs: Observation,
) -> float:
    dt = to_obs.time - from_obs.time
    return float(
        exact_transition_logpdf_batch(
            model, np.atleast_2d(theta), from_obs.state, to_obs.state, dt
        )[0]
    )


# ---------------------------------------------------------------------------
# Dataset simulation and persistence


def simulate_dataset(
    model: ModelSpec,
    theta_true: np.ndarray,
    n: int,
    dt: float,
    x0: np.ndarray,
    rng: np.random.Generator,
) -> Dataset:
    """Chain n-1 one-step transitions at spacing dt starting from x0."""
    if n < 2:
        raise ValueError("need n >= 2 observations")
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    times = np.arange(n) * dt
    states = np.empty((n, model.u))
    states[0] = x0
    if model.model_id == "binomial":
        # IID model: the first observation is itself a draw, x0 is a dummy
        states[0] = simulate_transition_batch(model, theta_true[None, :], x0, dt, rng)[0]
    for i in range(1, n):
        nxt = simulate_transition_batch(model, theta_true[None, :], states[i - 1], dt, rng)[0]
        if model.model_id == "lv" and nxt[0] < 0:
            raise RuntimeError("LV trajectory exceeded the population cap during data generation")
        states[i] = nxt
    return Dataset(times, states, model.model_id)


def _fmt(value: float, discrete: bool) -> str:
    if discrete:
        return str(int(round(value)))
    return repr(float(value))  # shortest round-trip decimal


def write_dataset(ds: Dataset, csv_path: Path, meta: dict | None = None, discrete: bool = True):
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"s{k+1}" for k in range(ds.u)])
        for i in range(ds.n):
            writer.writerow([repr(float(ds.times[i]))] + [_fmt(v, discrete) for v in ds.states[i]])
    if meta is not None:
        sidecar = csv_path.with_suffix(".json")
        sidecar.write_text(json.dumps({"model_id": ds.model_id, **meta}, indent=2))


def read_dataset(csv_path: Path, model_id: str | None = None) -> Dataset:
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(".json")
    if model_id is None:
        if not sidecar.exists():
            raise FileNotFoundError(f"no metadata sidecar for {csv_path}")
        model_id = json.loads(sidecar.read_text())["model_id"]
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "time":
        raise ValueError("dataset CSV must start with a 'time' column")
    times = [float(r[0]) for r in body]
    states = [[float(v) for v in r[1:]] for r in body]
    return Dataset(np.array(times), np.array(states), model_id)
