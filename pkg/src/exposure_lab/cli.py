"""Command-line front end.

Every command writes CSV files (each starting with the run config as a
comment header) and SVG figures into ``--out``. Exit status is 0 on success,
1 when a check fails or a run aborts, 2 for usage and config errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import rng as rngs
from .config import ConfigError, RunConfig
from .data import GaussianDataSpec
from .denoiser import AnalyticDenoiser, NoisyOracle, NoisyOracleConfig, PerturbedAnalytic
from .diagnostics import (frechet_gaussian, measure_delta_t, measure_eps_norms,
                          measure_multi_step_error, measure_single_step_error, norm_ratio_series,
                          sample_moments)
from .mlp import TrainConfig, save_weights, train_mlp
from .plotting import plot_columns, plot_series
from .sampler import SamplerConfig, record_to_csv, run_chain
from .scaling import invert_norm_ratio
from .theory import ddim_single_step_var, ddpm_single_step_var, ddpm_two_step_var, gaussian_chain_var

log = logging.getLogger("exposure_lab")

COMMANDS = ("verify-theory", "sample", "bias", "norms", "sweep", "train")

# block id for anchor draws in plain sampling runs; far from chain block ids
ANCHOR_BLOCK = 1 << 30


class CheckFailed(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "pass" if v else "fail"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, cfg: RunConfig, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(cfg.header())
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    log.info("wrote %s", path)
    return path


def _anchors(cfg: RunConfig, data, n: int) -> np.ndarray:
    x0 = data.sample(rngs.stream(cfg.seed, ANCHOR_BLOCK, rngs.DATA), n)
    return np.asarray(x0, dtype=np.float64).reshape(n, -1)


def _generate(cfg: RunConfig, denoiser, data, sampler: SamplerConfig, n: int, threads: int):
    anchor = _anchors(cfg, data, n) if denoiser.needs_anchor else None
    return run_chain(sampler, denoiser, n=n, anchor_x0=anchor, dim=data.dim, threads=threads)


# verify-theory

def verify_rows(cfg: RunConfig, threads: int = 1) -> list[tuple]:
    grid = cfg.grid_schedule()
    sched = grid.effective
    data = cfg.data()
    n = cfg.int("verify", "n")
    e1, e2 = cfg.float("verify", "error"), cfg.float("verify", "two_step_error")
    rel, rel2 = cfg.float("verify", "rel_tol"), cfg.float("verify", "two_step_rel_tol")
    n_se, scale = cfg.float("verify", "n_se"), cfg.float("verify", "tolerance")
    seed = cfg.seed
    rows = []

    def oracle(e):
        return NoisyOracle(NoisyOracleConfig(cfg.error_profile(e)), grid.parent)

    def e_at(e, i):
        return cfg.error_profile(e)(grid.parent, grid.parent_t(i))

    for name, kind, formula in (("ddpm_single", "ddpm", ddpm_single_step_var),
                                ("ddim_single", "ddim", ddim_single_step_var)):
        rep = measure_single_step_error(oracle(e1), data.sample, SamplerConfig(kind, grid, 0.0, None, seed),
                                        n, threads=threads)
        for t in range(1, grid.T):
            pred = formula(sched, t, e_at(e1, t + 1)).sampled_var
            meas, se = rep.measured_var[t], rep.measured_var_se[t]
            allowed = scale * max(rel * pred, n_se * se)
            rows.append((name, t, pred, meas, se, allowed, abs(meas - pred) <= allowed))
    rep = measure_single_step_error(oracle(e2), data.sample, SamplerConfig("ddpm", grid, 0.0, None, seed),
                                    n, steps=2, threads=threads)
    for t in range(2, grid.T):
        pred = ddpm_two_step_var(sched, t, e2).sampled_var
        meas, se = rep.measured_var[t - 1], rep.measured_var_se[t - 1]
        allowed = scale * rel2 * pred
        rows.append(("ddpm_two_step", t - 1, pred, meas, se, allowed, abs(meas - pred) <= allowed))
    return rows


VERIFY_COLUMNS = ("check", "t", "predicted", "measured", "se", "allowed", "pass")


def cmd_verify_theory(cfg: RunConfig, out: Path, threads: int) -> int:
    rows = verify_rows(cfg, threads)
    write_csv(out / "verify_theory.csv", cfg, VERIFY_COLUMNS, rows)
    for check in dict.fromkeys(r[0] for r in rows):
        sub = [r for r in rows if r[0] == check]
        ts = [r[1] for r in sub]
        plot_series(out / f"verify_{check}.svg", ts,
                    {"predicted": [r[2] for r in sub], "measured": [r[3] for r in sub]},
                    errors={"measured": [r[4] for r in sub]}, ylabel="variance", title=check)
    failed = [r for r in rows if not r[-1]]
    for r in failed:
        log.error("%s t=%d: predicted %.6g measured %.6g (allowed %.3g)", r[0], r[1], r[2], r[3], r[5])
    print(f"verify-theory: {len(rows) - len(failed)}/{len(rows)} checks passed")
    if failed:
        raise CheckFailed(f"{len(failed)} theory checks failed")
    return 0


# sample

def cmd_sample(cfg: RunConfig, out: Path, threads: int) -> int:
    data = cfg.data()
    rec = _generate(cfg, cfg.denoiser(), data, cfg.sampler(), cfg.int("run", "n_chains"), threads)
    record_to_csv(rec, out / "chains.csv", cfg.header())
    rows = []
    for k, t in enumerate(rec.timesteps):
        norm = float(np.linalg.norm(rec.eps[k], axis=1).mean()) if k < rec.eps.shape[0] else math.nan
        rows.append((int(t), float(rec.states[k].mean()), float(np.var(rec.states[k])), norm))
    write_csv(out / "sample_summary.csv", cfg, ("t", "state_mean", "state_var", "eps_norm"), rows)
    plot_series(out / "sample_state_var.svg", [r[0] for r in rows], {"state variance": [r[2] for r in rows]},
                ylabel="pooled variance")
    return 0


# bias

def _theory_curve(cfg: RunConfig, denoiser, sampler: SamplerConfig):
    data = cfg.data()
    if not isinstance(data, GaussianDataSpec):
        return None
    kinds = {NoisyOracle: "noisy", AnalyticDenoiser: "analytic", PerturbedAnalytic: "perturbed"}
    predictor = kinds.get(type(denoiser))
    if predictor is None:
        return None
    return gaussian_chain_var(data, sampler.grid, sampler.kind, predictor=predictor,
                              error=cfg.error_profile(), eta=sampler.eta, scaling=sampler.scaling)


def cmd_bias(cfg: RunConfig, out: Path, threads: int) -> int:
    denoiser, data, sampler = cfg.denoiser(), cfg.data(), cfg.sampler()
    n = cfg.int("run", "n_chains")
    report = measure_multi_step_error(denoiser, data.sample, sampler, n, threads=threads)
    single = measure_single_step_error(denoiser, data.sample, sampler, n, threads=threads)
    report.single_err[:] = single.single_err
    report.single_err_se[:] = single.single_err_se
    report.to_csv(out / "bias.csv", cfg.header())
    plot_columns(report, out / "bias_delta.svg", "delta", ylabel="exposure bias")
    plot_columns(report, out / "bias_errors.svg", "single_err", "multi_err", ylabel="variance error")
    curve = _theory_curve(cfg, denoiser, sampler)
    if curve is not None:
        rows = [(p.t, p.sampled_var, report.measured_var[p.t], report.measured_var_se[p.t])
                for p in sorted(curve, key=lambda p: p.t)]
        write_csv(out / "bias_theory.csv", cfg, ("t", "predicted", "measured", "se"), rows)
    return 0


# norms

def cmd_norms(cfg: RunConfig, out: Path, threads: int) -> int:
    denoiser, data, sampler = cfg.denoiser(), cfg.data(), cfg.sampler()
    report = measure_eps_norms(denoiser, data.sample, sampler, cfg.int("run", "n_chains"), threads=threads)
    report.to_csv(out / "norms.csv", cfg.header())
    plot_columns(report, out / "norms.svg", "eps_norm_train", "eps_norm_sample", ylabel="mean |eps|")
    plot_columns(report, out / "norm_ratio.svg", "norm_ratio", ylabel="sampling / training norm")
    try:
        fit = invert_norm_ratio(norm_ratio_series(report), cfg.int("norms", "t_min"))
        row = (fit.form, fit.k, fit.b, fit(1), fit(fit.T), "")
    except ValueError as exc:
        row = ("", math.nan, math.nan, math.nan, math.nan, str(exc))
    write_csv(out / "lambda_fit.csv", cfg, ("form", "k", "b", "lambda_first", "lambda_last", "note"), [row])
    return 0


# sweep

def sweep_rows(cfg: RunConfig, threads: int = 1, denoiser=None) -> list[tuple]:
    grid_b = cfg.grid("sweep", "b_grid")
    if not grid_b:
        raise ConfigError("[sweep] b_grid is empty")
    denoiser = denoiser or cfg.denoiser()
    data = cfg.data()
    mu, cov = data.moments()
    n, n_gen = cfg.int("run", "n_chains"), cfg.int("sweep", "n_generate")
    rows = []
    for b in grid_b:
        sampler = cfg.sampler(b=b)
        rep = measure_delta_t(denoiser, data.sample, sampler, n, threads=threads)
        rec = _generate(cfg, denoiser, data, sampler, n_gen, threads)
        m, c = sample_moments(rec.terminal)
        fd = frechet_gaussian(m, c, mu, cov)
        rows.append([b, rep.delta[1], rep.delta_se[1], fd])
        log.info("b=%.4f delta_1=%.6g frechet=%.6g", b, rep.delta[1], fd)
    i_delta = int(np.argmin([r[1] for r in rows]))
    i_fd = int(np.argmin([r[3] for r in rows]))
    return [tuple(r) + (i == i_delta, i == i_fd) for i, r in enumerate(rows)]


SWEEP_COLUMNS = ("b", "delta_1", "delta_1_se", "frechet", "argmin_delta", "argmin_frechet")


def cmd_sweep(cfg: RunConfig, out: Path, threads: int) -> int:
    rows = sweep_rows(cfg, threads)
    body = [r[:4] + (int(r[4]), int(r[5])) for r in rows]
    write_csv(out / "sweep.csv", cfg, SWEEP_COLUMNS, body)
    bs = [r[0] for r in rows]
    best = bs[[r[4] for r in rows].index(True)]
    plot_series(out / "sweep_delta.svg", bs, {"delta_1": [r[1] for r in rows]},
                errors={"delta_1": [r[2] for r in rows]}, xlabel="b", ylabel="delta_1", mark=best)
    plot_series(out / "sweep_frechet.svg", bs, {"frechet": [r[3] for r in rows]}, xlabel="b",
                ylabel="terminal Frechet distance")
    rho = spearmanr([r[1] for r in rows], [r[3] for r in rows]).statistic if len(rows) > 2 else math.nan
    write_csv(out / "sweep_summary.csv", cfg, ("b_best_delta", "b_best_frechet", "spearman"),
              [(best, bs[[r[5] for r in rows].index(True)], float(rho))])
    print(f"sweep: argmin delta_1 at b={best:g}; spearman(delta_1, frechet)={rho:.3f}")
    return 0


# train

def train_config(cfg: RunConfig) -> TrainConfig:
    hidden = tuple(int(v) for v in cfg.floats("train", "hidden"))
    return TrainConfig(steps=cfg.int("train", "steps"), batch=cfg.int("train", "batch"),
                       lr=cfg.float("train", "lr"), final_lr=cfg.float("train", "final_lr"),
                       decay=cfg.float("train", "decay"), hidden=hidden, seed=cfg.seed,
                       log_every=cfg.int("train", "log_every"))


def cmd_train(cfg: RunConfig, out: Path, threads: int) -> int:
    data = cfg.data()
    result = train_mlp(data.sample, cfg.parent_schedule(), data.dim, train_config(cfg))
    save_weights(result.model, out / "weights.csv")
    write_csv(out / "loss.csv", cfg, ("step", "loss"), result.curve)
    plot_series(out / "loss.svg", [s for s, _ in result.curve], {"loss": [v for _, v in result.curve]},
                xlabel="step", ylabel="loss")
    print(f"train: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
    return 0


HANDLERS = {"verify-theory": cmd_verify_theory, "sample": cmd_sample, "bias": cmd_bias,
            "norms": cmd_norms, "sweep": cmd_sweep, "train": cmd_train}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file, or any CSV this tool wrote")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-q", "--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="exposure-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    rerun = sub.add_parser("rerun", parents=[common], help="repeat the run recorded in an output CSV")
    rerun.add_argument("source", help="CSV written by an earlier run")
    return parser


def load_config(args) -> RunConfig:
    if args.command == "rerun":
        cfg = RunConfig.from_file(args.source)
    elif args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig.default()
    if args.command != "rerun":
        cfg.set(f"run.command={args.command}")
    if args.seed is not None:
        cfg.set(f"run.seed={args.seed}")
    for item in args.set:
        cfg.set(item)
    if cfg.get("run", "command") not in HANDLERS:
        raise ConfigError(f"[run] command = {cfg.get('run', 'command')!r} is not a known command")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[cfg.get("run", "command")](cfg, out, args.threads)
    except ConfigError as exc:
        print(f"exposure-lab: config error: {exc}", file=sys.stderr)
        return 2
    except CheckFailed as exc:
        print(f"exposure-lab: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"exposure-lab: run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
