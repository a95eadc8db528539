"""Per-factor ABC rejection sampling and parallel orchestration.

Each posterior factor conditions on one observed transition (x_{i-1}, x_i).
Draws are made in fixed-size batches; the RNG stream for a batch is keyed
by (seed, factor_index, batch_index) so results are bitwise identical for
any worker count and the batch size is performance-only.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core_math import LpBallSpec, ball_volume
from .models import Dataset, ModelSpec, Observation, PriorSpec, sample_prior, simulate_transition_batch, stream

BATCH_SIZE = 4096


class FactorCapError(RuntimeError):
    """A factor exhausted its draw budget before reaching m acceptances."""

    def __init__(self, factor_index: int, accepted: int, draws: int):
        self.factor_index = factor_index
        self.accepted = accepted
        self.draws = draws
        super().__init__(
            f"factor {factor_index}: only {accepted} acceptances after {draws} draws "
            "(epsilon too small or prior too diffuse?)"
        )


class AggregateFactorError(RuntimeError):
    def __init__(self, errors: list[FactorCapError]):
        self.errors = errors
        details = "; ".join(str(e) for e in errors)
        super().__init__(f"{len(errors)} factor(s) failed: {details}")


@dataclass(frozen=True)
class ABCConfig:
    m: int
    ball: LpBallSpec
    seed: int
    max_draws_per_factor: int = 10_000_000
    parallelism: int = 1

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need m >= 2 accepted draws per factor")
        if self.max_draws_per_factor < self.m:
            raise ValueError("max_draws_per_factor must be >= m")


@dataclass(frozen=True)
class FactorSampleSet:
    factor_index: int  # i in 2..n
    samples: np.ndarray  # (m, d), accepted parameter draws
    total_draws: int  # M_i: draws needed for the m-th acceptance
    x_prev: np.ndarray
    x_obs: np.ndarray

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.m / self.total_draws


@dataclass
class RunReport:
    factor_indices: list[int] = field(default_factory=list)
    acceptance_rates: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    log_ci: list[float] = field(default_factory=list)
    total_simulator_calls: int = 0

    @property
    def mean_acceptance(self) -> float:
        return float(np.mean(self.acceptance_rates))


def _accept_mask(sim: np.ndarray, x_obs: np.ndarray, ball: LpBallSpec) -> np.ndarray:
    diff = sim - x_obs
    if ball.discrete and ball.epsilon == 0:
        mask = np.all(sim == x_obs, axis=1)
    elif ball.p == 2:
        mask = np.sqrt(np.sum(diff * diff, axis=1)) <= ball.epsilon
    else:
        mask = np.max(np.abs(diff), axis=1) <= ball.epsilon
    # LV trajectories past the population cap come back as -1 and never match
    return mask & np.all(sim >= 0, axis=1)


def sample_factor(
    model: ModelSpec,
    prior: PriorSpec,
    pair: tuple[Observation, Observation],
    cfg: ABCConfig,
    factor_index: int,
) -> FactorSampleSet:
    """ABC rejection sampling for a single transition factor.

    Repeats {theta* ~ prior; simulate x*; accept iff ||x* - x_i||_p <= eps}
    until m acceptances (exact state match when discrete and eps = 0).
    """
    if cfg.ball.discrete != model.discrete:
        raise ValueError("ball.discrete must match the model's state type")
    if cfg.ball.dim_u != model.u:
        raise ValueError("ball.dim_u must match the model's observation dimension")
    x_prev, x_obs = pair
    dt = x_obs.time - x_prev.time
    accepted: list[np.ndarray] = []
    n_accepted = 0
    draws = 0
    total_draws = None
    batch_index = 0
    while n_accepted < cfg.m:
        if draws >= cfg.max_draws_per_factor:
            raise FactorCapError(factor_index, n_accepted, draws)
        batch = min(BATCH_SIZE, cfg.max_draws_per_factor - draws)
        rng = stream(cfg.seed, factor_index, batch_index)
        thetas = sample_prior(prior, rng, size=batch)
        sim = simulate_transition_batch(model, thetas, x_prev.state, dt, rng)
        mask = _accept_mask(sim, x_obs.state, cfg.ball)
        hits = np.flatnonzero(mask)
        if hits.size:
            accepted.append(thetas[hits])
            if n_accepted + hits.size >= cfg.m and total_draws is None:
                # position of the m-th acceptance inside this batch
                total_draws = draws + int(hits[cfg.m - n_accepted - 1]) + 1
            n_accepted += hits.size
        draws += batch
        batch_index += 1
    samples = np.concatenate(accepted, axis=0)[: cfg.m]
    return FactorSampleSet(factor_index, samples, total_draws, x_prev.state, x_obs.state)


def _factor_task(args):
    model, prior, pair, cfg, factor_index = args
    t0 = time.perf_counter()
    fs = sample_factor(model, prior, pair, cfg, factor_index)
    return fs, time.perf_counter() - t0


def sample_all_factors(
    model: ModelSpec,
    prior: PriorSpec,
    data: Dataset,
    cfg: ABCConfig,
) -> tuple[list[FactorSampleSet], RunReport]:
    """Sample every transition factor i = 2..n (embarrassingly parallel)."""
    tasks = [(model, prior, (prev, obs), cfg, i) for i, prev, obs in data.pairs()]
    results: dict[int, tuple[FactorSampleSet, float]] = {}
    errors: list[FactorCapError] = []
    if cfg.parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            for task, outcome in zip(tasks, pool.map(_factor_task_safe, tasks)):
                if isinstance(outcome, FactorCapError):
                    errors.append(outcome)
                else:
                    results[task[-1]] = outcome
    else:
        for task in tasks:
            try:
                results[task[-1]] = _factor_task(task)
            except FactorCapError as exc:
                errors.append(exc)
    if errors:
        raise AggregateFactorError(sorted(errors, key=lambda e: e.factor_index))
    report = RunReport()
    factor_sets = []
    for i, _, _ in data.pairs():
        fs, elapsed = results[i]
        factor_sets.append(fs)
        report.factor_indices.append(i)
        report.acceptance_rates.append(fs.acceptance_rate)
        report.wall_clock.append(elapsed)
        report.log_ci.append(estimate_ci(fs, cfg.ball))
        report.total_simulator_calls += fs.total_draws
    return factor_sets, report


def _factor_task_safe(args):
    try:
        return _factor_task(args)
    except FactorCapError as exc:
        return exc


def estimate_ci(fs: FactorSampleSet, ball: LpBallSpec) -> float:
    """log c_i estimate: log m - log V - log M_i (acceptance-rate estimator)."""
    return float(np.log(fs.m) - np.log(ball_volume(ball)) - np.log(fs.total_draws))


# ---------------------------------------------------------------------------
# Persistence: one CSV per factor plus a run-level JSON, enough to resume
# posterior assembly without resampling.


def save_factors(factor_sets: list[FactorSampleSet], report: RunReport, out_dir, config_echo: dict):
    import csv as _csv
    import json
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = factor_sets[0].samples.shape[1]
    for fs in factor_sets:
        with open(out_dir / f"factor_{fs.factor_index:04d}.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow([f"theta_{k+1}" for k in range(d)])
            for row in fs.samples:
                writer.writerow([repr(float(v)) for v in row])
    run = {
        "config": config_echo,
        "factors": [
            {
                "factor_index": fs.factor_index,
                "total_draws": fs.total_draws,
                "acceptance_rate": fs.acceptance_rate,
                "log_ci": log_ci,
                "x_prev": [float(v) for v in fs.x_prev],
                "x_obs": [float(v) for v in fs.x_obs],
            }
            for fs, log_ci in zip(factor_sets, report.log_ci)
        ],
        "total_simulator_calls": report.total_simulator_calls,
    }
    (out_dir / "run.json").write_text(json.dumps(run, indent=2))


def load_factors(out_dir) -> tuple[list[FactorSampleSet], list[float]]:
    import json
    from pathlib import Path

    out_dir = Path(out_dir)
    run = json.loads((out_dir / "run.json").read_text())
    factor_sets = []
    log_cis = []
    for entry in run["factors"]:
        i = entry["factor_index"]
        samples = np.loadtxt(out_dir / f"factor_{i:04d}.csv", delimiter=",", skiprows=1, ndmin=2)
        factor_sets.append(
            FactorSampleSet(
                i,
                samples,
                entry["total_draws"],
                np.array(entry["x_prev"]),
                np.array(entry["x_obs"]),
            )
        )
        log_cis.append(entry["log_ci"])
    return factor_sets, log_cis
