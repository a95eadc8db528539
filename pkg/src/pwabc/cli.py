"""Batch command-line front end.

Subcommands: simulate, infer, oracle, report, sweep-q.  All inputs come
from a single JSON config; outputs are CSV/JSON/SVG files in a run
directory.  Exit codes: 0 success, 1 runtime failure, 2 config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import abc_engine, gaussian_estimator, kde_estimator, oracle
from .abc_engine import ABCConfig, AggregateFactorError
from .core_math import Lattice, LpBallSpec, lattice_integral
from .kde_estimator import LatticePosterior
from .models import (
    Dataset,
    ModelSpec,
    PriorSpec,
    make_model,
    read_dataset,
    simulate_dataset,
    stream,
    to_inference_scale,
    write_dataset,
)


class ConfigError(ValueError):
    pass


_SCHEMAS = {
    "top": {"model", "prior", "abc", "estimator", "output"},
    "model": {"model_id", "params", "theta_true", "x0", "n", "dt"},
    "prior": {"kind", "mean", "sd", "lower", "upper"},
    "abc": {"m", "epsilon", "p", "seed", "max_draws", "workers"},
    "estimator": {"backend", "q", "lattice"},
    "lattice": {"lower", "upper", "points"},
}


def _check_keys(section: dict, name: str):
    unknown = set(section) - _SCHEMAS[name]
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r} section: {sorted(unknown)}")


def load_config(path: Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(cfg, "top")
    for name in ("model", "prior", "abc"):
        if name not in cfg:
            raise ConfigError(f"missing {name!r} section")
        _check_keys(cfg[name], name)
    if "estimator" in cfg:
        _check_keys(cfg["estimator"], "estimator")
        if isinstance(cfg["estimator"].get("lattice"), dict):
            _check_keys(cfg["estimator"]["lattice"], "lattice")
    return cfg


def build_model(cfg: dict) -> ModelSpec:
    try:
        return make_model(cfg["model"]["model_id"], cfg["model"].get("params"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad model section: {exc}") from exc


def build_prior(cfg: dict) -> PriorSpec:
    p = cfg["prior"]
    try:
        if p["kind"] == "gaussian":
            return PriorSpec("gaussian", mean=np.asarray(p["mean"]), sd=np.asarray(p["sd"]))
        if p["kind"] == "uniform_box":
            return PriorSpec("uniform_box", lower=np.asarray(p["lower"]), upper=np.asarray(p["upper"]))
        raise ConfigError(f"unknown prior kind {p['kind']!r}")
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad prior section: {exc}") from exc


def build_abc_config(cfg: dict, model: ModelSpec, seed_override=None, workers_override=None) -> ABCConfig:
    a = cfg["abc"]
    try:
        p_raw = a.get("p", "inf")
        p = float("inf") if p_raw in ("inf", "Infinity") else float(p_raw)
        ball = LpBallSpec(p=p, epsilon=float(a["epsilon"]), dim_u=model.u, discrete=model.discrete)
        return ABCConfig(
            m=int(a["m"]),
            ball=ball,
            seed=int(seed_override if seed_override is not None else a["seed"]),
            max_draws_per_factor=int(a.get("max_draws", 10_000_000)),
            parallelism=int(workers_override if workers_override is not None else a.get("workers", 1)),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad abc section: {exc}") from exc


def _prepare_out(out: Path, force: bool):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_lattice_csv(lp: LatticePosterior, path: Path):
    pts = lp.lattice.points()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{k+1}" for k in range(lp.lattice.dim)] + ["log_density"])
        for row, ld in zip(pts, lp.log_density.ravel()):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(ld))])


def _lattice_meta(lat: Lattice) -> dict:
    return {
        "lower": [float(v) for v in lat.lower],
        "upper": [float(v) for v in lat.upper],
        "points_per_dim": [int(v) for v in lat.points_per_dim],
    }


def _lattice_from_meta(meta: dict) -> Lattice:
    return Lattice(np.array(meta["lower"]), np.array(meta["upper"]), np.array(meta["points_per_dim"]))


def _load_lattice_posterior(run_dir: Path, name: str, meta: dict) -> LatticePosterior:
    lat = _lattice_from_meta(meta)
    vals = np.loadtxt(run_dir / name, delimiter=",", skiprows=1, ndmin=2)[:, -1]
    log_density = vals.reshape(lat.shape)
    return LatticePosterior(lat, log_density, meta.get("log_normaliser", 0.0))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    m = cfg["model"]
    try:
        theta_true = to_inference_scale(np.asarray(m["theta_true"], dtype=float), model.transform)
        n, dt, x0 = int(m["n"]), float(m["dt"]), np.asarray(m["x0"], dtype=float)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad model section: {exc}") from exc
    seed = int(args.seed if args.seed is not None else cfg["abc"]["seed"])
    out = _prepare_out(args.out, args.force)
    ds = simulate_dataset(model, theta_true, n, dt, x0, stream(seed, 0))
    write_dataset(
        ds,
        out / "dataset.csv",
        meta={"theta_true": [float(v) for v in theta_true], "seed": seed, "dt": dt},
        discrete=model.discrete,
    )
    print(f"simulated {ds.n} observations of {model.model_id} -> {out/'dataset.csv'}")
    return 0


def run_inference(cfg: dict, data: Dataset, out: Path, seed=None, workers=None) -> dict:
    """Shared core of `infer`: sample factors, fit backends, write artifacts."""
    model = build_model(cfg)
    prior = build_prior(cfg)
    abc_cfg = build_abc_config(cfg, model, seed_override=seed, workers_override=workers)
    est = cfg.get("estimator", {})
    backend = est.get("backend", "both")
    if backend not in ("gaussian", "kde", "both"):
        raise ConfigError(f"unknown backend {backend!r}")

    factor_sets, report = abc_engine.sample_all_factors(model, prior, data, abc_cfg)
    echo = {**cfg, "abc": {**cfg["abc"], "seed": abc_cfg.seed}}
    abc_engine.save_factors(factor_sets, report, out, echo)
    (out / "config.json").write_text(json.dumps(echo, indent=2))
    (out / "timing.json").write_text(
        json.dumps({"wall_clock_per_factor": report.wall_clock}, indent=2)
    )

    summary: dict = {
        "n": data.n,
        "backend": backend,
        "mean_acceptance": report.mean_acceptance,
        "per_factor": [
            {
                "factor_index": fs.factor_index,
                "mean": [float(v) for v in fs.samples.mean(axis=0)],
                "cov": np.atleast_2d(np.cov(fs.samples, rowvar=False)).tolist(),
                "log_ci": log_ci,
                "acceptance": fs.acceptance_rate,
            }
            for fs, log_ci in zip(factor_sets, report.log_ci)
        ],
    }

    q = est.get("q", "auto")
    kfactors = [kde_estimator.fit_kde_factor(fs, q) for fs in factor_sets]
    means = np.stack([fs.samples.mean(axis=0) for fs in factor_sets])
    sds = np.stack([np.std(fs.samples, axis=0, ddof=1) for fs in factor_sets])
    lat_cfg = est.get("lattice") or {}
    d = len(model.transform)
    if lat_cfg.get("lower") is not None and lat_cfg.get("upper") is not None:
        points = lat_cfg.get("points") or (400 if d <= 2 else 120)
        lattice = Lattice(
            np.asarray(lat_cfg["lower"], dtype=float),
            np.asarray(lat_cfg["upper"], dtype=float),
            np.full(d, int(points)),
        )
    else:
        # coarse pass over the union of factor spreads, then refine onto
        # the region actually carrying posterior mass
        coarse = kde_estimator.default_lattice(means, sds, prior, 80 if d <= 2 else 40)
        lattice = kde_estimator.refined_lattice(kfactors, prior, coarse, lat_cfg.get("points"))
    summary["lattice"] = _lattice_meta(lattice)

    if backend in ("gaussian", "both"):
        gfactors = [gaussian_estimator.fit_gaussian_factor(fs) for fs in factor_sets]
        gp = gaussian_estimator.assemble_gaussian_posterior(gfactors, prior)
        log_ml_g = gaussian_estimator.log_marginal_gaussian(gfactors, prior, report.log_ci)
        summary["gaussian"] = {
            "mu_post": [float(v) for v in gp.mean],
            "sigma_post": gp.cov.tolist(),
            "log_marginal": log_ml_g,
            "truncated": gp.truncated,
            "log_truncation_mass": gp.log_truncation_mass,
        }
        log_g = gaussian_estimator.posterior_log_density_batch(gp, lattice.points()).reshape(
            lattice.shape
        )
        norm = lattice_integral(log_g, lattice)
        glp = LatticePosterior(lattice, log_g - norm, norm)
        _write_lattice_csv(glp, out / "gaussian_posterior.csv")

    if backend in ("kde", "both"):
        klp = kde_estimator.assemble_lattice_posterior(kfactors, prior, lattice)
        log_ml_k = kde_estimator.log_marginal_kde(klp, report.log_ci)
        summary["kde"] = {
            "q": kfactors[0].q_used,
            "log_marginal": log_ml_k,
            "log_normaliser": klp.log_normaliser,
            "posterior_mean": [float(v) for v in klp.mean()],
        }
        _write_lattice_csv(klp, out / "kde_posterior.csv")

    (out / "posterior_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    data = read_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    try:
        summary = run_inference(cfg, data, out, seed=args.seed, workers=args.workers)
    except AggregateFactorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for backend in ("gaussian", "kde"):
        if backend in summary:
            print(f"{backend}: log marginal = {summary[backend]['log_marginal']:.4f}")
    print(f"mean acceptance rate = {summary['mean_acceptance']:.4g}")
    return 0


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    prior = build_prior(cfg)
    data = read_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    if args.run is not None:
        meta = json.loads((Path(args.run) / "posterior_summary.json").read_text())["lattice"]
        lattice = _lattice_from_meta(meta)
    else:
        lat_cfg = (cfg.get("estimator") or {}).get("lattice") or {}
        if lat_cfg.get("lower") is None:
            raise ConfigError("oracle needs either --run or explicit lattice bounds in config")
        d = len(model.transform)
        lattice = Lattice(
            np.asarray(lat_cfg["lower"], dtype=float),
            np.asarray(lat_cfg["upper"], dtype=float),
            np.full(d, int(lat_cfg.get("points", 400))),
        )
    result = oracle.exact_posterior_lattice(model, prior, data, lattice)
    _write_lattice_csv(result.posterior, out / "oracle_posterior.csv")
    (out / "oracle.json").write_text(
        json.dumps(
            {"log_marginal_true": result.log_marginal_true, "model_id": result.model_id,
             "lattice": _lattice_meta(lattice)},
            indent=2,
        )
    )
    print(f"oracle log marginal = {result.log_marginal_true:.4f}")
    return 0


def _marginal_csv(lp: LatticePosterior, dim: int, path: Path):
    axis = lp.lattice.axes()[dim]
    dens = lp.marginal((dim,)) / lp.lattice.cell_widths[dim]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{dim+1}", "density"])
        for x, yv in zip(axis, dens):
            writer.writerow([repr(float(x)), repr(float(yv))])


def _mass_levels(masses: np.ndarray, levels: tuple[float, ...]) -> dict[float, float]:
    """Density-mass thresholds: the smallest cell mass inside each HPD region."""
    flat = np.sort(masses.ravel())[::-1]
    cum = np.cumsum(flat)
    out = {}
    for lv in levels:
        idx = int(np.searchsorted(cum, lv))
        out[lv] = float(flat[min(idx, flat.size - 1)])
    return out


def _svg_line_plot(path: Path, curves: dict[str, tuple[np.ndarray, np.ndarray]], title: str):
    """Minimal self-contained SVG line plot (no plotting dependency)."""
    w, h, pad = 640, 420, 50
    xs = np.concatenate([c[0] for c in curves.values()])
    ys = np.concatenate([c[1] for c in curves.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = 0.0, float(ys.max()) * 1.05 or 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]

    def sx(x):
        return pad + (x - x0) / (x1 - x0 + 1e-300) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0 + 1e-300) * (h - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{h-pad}" x2="{w-pad}" y2="{h-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h-pad}" stroke="black"/>',
    ]
    for ci, (label, (cx, cy)) in enumerate(curves.items()):
        pts = " ".join(f"{sx(x):.2f},{sy(v):.2f}" for x, v in zip(cx, cy))
        color = colors[ci % len(colors)]
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{w-pad-120}" y="{pad+16*ci}" font-size="12" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    summary = json.loads((run_dir / "posterior_summary.json").read_text())
    meta = summary["lattice"]
    posteriors: dict[str, LatticePosterior] = {}
    for backend in ("gaussian", "kde"):
        name = f"{backend}_posterior.csv"
        if (run_dir / name).exists():
            posteriors[backend] = _load_lattice_posterior(run_dir, name, meta)

    oracle_lp = None
    oracle_ml = None
    if args.oracle:
        odir = Path(args.oracle)
        ometa = json.loads((odir / "oracle.json").read_text())
        oracle_ml = ometa["log_marginal_true"]
        try:
            oracle_lp = _load_lattice_posterior(odir, "oracle_posterior.csv", ometa["lattice"])
        except (OSError, ValueError):
            oracle_lp = None

    d = len(meta["lower"])
    for backend, lp in posteriors.items():
        for k in range(d):
            _marginal_csv(lp, k, out / f"{backend}_marginal_dim{k+1}.csv")
    if oracle_lp is not None:
        for k in range(d):
            _marginal_csv(oracle_lp, k, out / f"oracle_marginal_dim{k+1}.csv")

    with open(out / "marginal_likelihoods.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "log_marginal"])
        if oracle_ml is not None:
            writer.writerow(["oracle", repr(float(oracle_ml))])
        for backend in posteriors:
            if backend in summary:
                writer.writerow([backend, repr(float(summary[backend]["log_marginal"]))])

    with open(out / "divergences.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["backend", "tv", "kl"])
        for backend, lp in posteriors.items():
            if oracle_lp is not None and oracle_lp.lattice.shape == lp.lattice.shape:
                div = oracle.divergence(oracle_lp, lp)
                writer.writerow([backend, repr(div["tv"]), repr(div["kl"])])
            else:
                writer.writerow([backend, "", ""])

    if d >= 2:
        levels = (0.05, 0.10, 0.50, 0.90, 0.95)
        with open(out / "contour_levels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["backend", "dim_a", "dim_b", "mass", "cell_mass_level"])
            for backend, lp in posteriors.items():
                for ia in range(d):
                    for ib in range(ia + 1, d):
                        marg = lp.marginal((ia, ib))
                        for lv, thr in _mass_levels(marg, levels).items():
                            writer.writerow([backend, ia + 1, ib + 1, lv, repr(thr)])

    if d == 1:
        curves = {}
        if oracle_lp is not None:
            axis = oracle_lp.lattice.axes()[0]
            curves["oracle"] = (axis, oracle_lp.marginal((0,)) / oracle_lp.lattice.cell_widths[0])
        for backend, lp in posteriors.items():
            axis = lp.lattice.axes()[0]
            curves[backend] = (axis, lp.marginal((0,)) / lp.lattice.cell_widths[0])
        if curves:
            _svg_line_plot(out / "posterior_marginal_dim1.svg", curves, "posterior density")
    print(f"report written to {out}")
    return 0


def cmd_sweep_q(args) -> int:
    cfg = load_config(args.config)
    data = read_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    qs = [float(q) for q in args.qs.split(",")]
    model = build_model(cfg)
    prior = build_prior(cfg)
    abc_cfg = build_abc_config(cfg, model, seed_override=args.seed, workers_override=args.workers)
    factor_sets, report = abc_engine.sample_all_factors(model, prior, data, abc_cfg)
    means = np.stack([fs.samples.mean(axis=0) for fs in factor_sets])
    sds = np.stack([np.std(fs.samples, axis=0, ddof=1) for fs in factor_sets])
    lattice = kde_estimator.default_lattice(means, sds, prior)
    for q in qs:
        kfactors = [kde_estimator.fit_kde_factor(fs, q) for fs in factor_sets]
        lp = kde_estimator.assemble_lattice_posterior(kfactors, prior, lattice)
        for k in range(lattice.dim):
            _marginal_csv(lp, k, out / f"q_{q:g}_marginal_dim{k+1}.csv")
    print(f"swept q over {qs} -> {out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwabc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=False):
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--force", action="store_true")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if data:
            p.add_argument("--data", required=True, type=Path)

    p = sub.add_parser("simulate", help="simulate a dataset from the configured model")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="run PW-ABC inference on a dataset")
    add_common(p, data=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("oracle", help="exact posterior / marginal likelihood")
    add_common(p, data=True)
    p.add_argument("--run", type=Path, default=None, help="reuse this run's lattice")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("report", help="comparison tables and plot files for a run")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--oracle", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep-q", help="kernel posterior curves for a list of q values")
    add_common(p, data=True)
    p.add_argument("--qs", required=True, help="comma-separated q values")
    p.set_defaults(func=cmd_sweep_q)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AggregateFactorError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
