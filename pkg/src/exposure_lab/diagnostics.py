"""Monte Carlo measurement of sampling variance errors and eps norms.

All estimators pool every coordinate of every chain at a timestep into one
population (the ``numpy.var`` convention) and accumulate it with a mergeable
one-pass moment accumulator, so shard-parallel runs reproduce the sequential
answer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng as rngs
from .denoiser import Denoiser
from .sampler import SamplerConfig, initial_state, iterate_chain
from .schedule import NoiseSchedule, RespacedSchedule

MIN_CHAINS = 1000
TRAIN_ORACLE = 5

DataSampler = Callable[[np.random.Generator, int], np.ndarray]


class MomentAccumulator:
    """Running count, mean and central moment sums M2..M4 (mergeable, one pass)."""

    __slots__ = ("n", "mean", "m2", "m3", "m4")

    def __init__(self):
        self.n = 0
        self.mean = self.m2 = self.m3 = self.m4 = 0.0

    @classmethod
    def of(cls, values) -> MomentAccumulator:
        acc = cls()
        acc.add(values)
        return acc

    def add(self, values) -> MomentAccumulator:
        x = np.asarray(values, dtype=np.float64).ravel()
        if x.size == 0:
            return self
        other = MomentAccumulator()
        other.n = x.size
        other.mean = float(x.mean())
        d = x - other.mean
        d2 = d * d
        other.m2 = float(d2.sum())
        other.m3 = float((d2 * d).sum())
        other.m4 = float((d2 * d2).sum())
        return self.merge(other)

    def merge(self, o: MomentAccumulator) -> MomentAccumulator:
        if o.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2, self.m3, self.m4 = o.n, o.mean, o.m2, o.m3, o.m4
            return self
        na, nb = self.n, o.n
        n = na + nb
        delta = o.mean - self.mean
        d_n = delta / n
        m2 = self.m2 + o.m2 + delta * d_n * na * nb
        m3 = (self.m3 + o.m3 + delta * d_n * d_n * na * nb * (na - nb)
              + 3.0 * d_n * (na * o.m2 - nb * self.m2))
        m4 = (self.m4 + o.m4
              + delta * d_n ** 3 * na * nb * (na * na - na * nb + nb * nb)
              + 6.0 * d_n * d_n * (na * na * o.m2 + nb * nb * self.m2)
              + 4.0 * d_n * (na * o.m3 - nb * self.m3))
        self.n, self.mean, self.m2, self.m3, self.m4 = n, self.mean + d_n * nb, m2, m3, m4
        return self

    @property
    def var(self) -> float:
        """Population variance (ddof = 0)."""
        return self.m2 / self.n if self.n else math.nan

    @property
    def var_se(self) -> float:
        if self.n < 2:
            return math.nan
        m2, m4 = self.m2 / self.n, self.m4 / self.n
        return math.sqrt(max(m4 - m2 * m2, 0.0) / self.n)

    @property
    def mean_se(self) -> float:
        return math.sqrt(self.var / self.n) if self.n > 1 else math.nan


def merge_all(accs) -> MomentAccumulator:
    out = MomentAccumulator()
    for a in accs:
        out.merge(a)
    return out


def frechet_gap_1d(var_sampled: float, var_train: float) -> float:
    """Per-dimension Frechet distance between zero-mean isotropic Gaussians."""
    if var_sampled < 0 or var_train < 0:
        raise ValueError("variances must be non-negative")
    return (math.sqrt(var_sampled) - math.sqrt(var_train)) ** 2


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _check_psd(c: np.ndarray, name: str) -> np.ndarray:
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[0] != c.shape[1] or not np.allclose(c, c.T, atol=1e-10):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
        raise ValueError(f"{name} is not positive semidefinite")
    return c


def frechet_gaussian(mean1, cov1, mean2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    mu1, mu2 = np.atleast_1d(mean1).astype(float), np.atleast_1d(mean2).astype(float)
    s1, s2 = _check_psd(cov1, "cov1"), _check_psd(cov2, "cov2")
    r1 = _psd_sqrt(s1)
    # tr sqrt(S1 S2) == tr sqrt(S1^1/2 S2 S1^1/2), and the latter is symmetric PSD
    cross = _psd_sqrt(r1 @ s2 @ r1)
    d = mu1 - mu2
    return float(max(d @ d + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross), 0.0))


def sample_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.atleast_2d(x)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


REPORT_COLUMNS = ("t", "train_var", "measured_var", "delta", "single_err", "multi_err",
                  "eps_norm_train", "eps_norm_sample", "norm_ratio", "n")


@dataclass
class BiasReport:
    """Per-timestep aggregates on grid indices t = 0..T' (NaN where not measured)."""

    t: np.ndarray
    train_var: np.ndarray
    measured_var: np.ndarray = None
    measured_var_se: np.ndarray = None
    delta: np.ndarray = None
    delta_se: np.ndarray = None
    single_err: np.ndarray = None
    single_err_se: np.ndarray = None
    multi_err: np.ndarray = None
    multi_err_se: np.ndarray = None
    eps_norm_train: np.ndarray = None
    eps_norm_train_se: np.ndarray = None
    eps_norm_sample: np.ndarray = None
    eps_norm_sample_se: np.ndarray = None
    norm_ratio: np.ndarray = None
    n: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        size = len(self.t)
        for f in fields(self):
            if f.name in ("t", "meta"):
                continue
            if getattr(self, f.name) is None:
                setattr(self, f.name, np.full(size, np.nan if f.name != "n" else 0.0))

    @classmethod
    def for_grid(cls, grid: RespacedSchedule) -> BiasReport:
        ts = np.arange(grid.T + 1)
        return cls(ts, np.array([grid.effective.train_var(int(t)) for t in ts]))

    def at(self, column: str, t: int) -> float:
        return float(getattr(self, column)[int(t)])

    def to_csv(self, path: str | Path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for i in range(len(self.t)):
                row = [int(self.t[i])]
                for col in REPORT_COLUMNS[1:-1]:
                    v = float(getattr(self, col)[i])
                    row.append("" if math.isnan(v) else repr(v))
                row.append(int(self.n[i]))
                w.writerow(row)


def _fill_variance(report: BiasReport, accs: dict[int, MomentAccumulator]) -> None:
    for t, acc in accs.items():
        report.measured_var[t] = acc.var
        report.measured_var_se[t] = acc.var_se
        report.n[t] = acc.n


def _anchored_block(config: SamplerConfig, denoiser: Denoiser, data_sampler: DataSampler,
                    block: int, start: int, stop: int, want_train: bool):
    grid = config.grid
    sched = grid.effective
    m = stop - start
    x0 = np.asarray(data_sampler(rngs.stream(config.seed, block, rngs.DATA), m), dtype=np.float64)
    x0 = x0.reshape(m, -1)
    x = initial_state(config, block, m, x0.shape[1], x0)
    resid = {grid.T: MomentAccumulator.of(x - np.sqrt(sched.alpha_bar(grid.T)) * x0)}
    sample_norm: dict[int, MomentAccumulator] = {}
    train_norm: dict[int, MomentAccumulator] = {}
    fwd = rngs.StepStreams(config.seed, block, rngs.FORWARD)
    oracle = rngs.StepStreams(config.seed, block, TRAIN_ORACLE)
    for step in iterate_chain(config, denoiser, x, x0, block):
        t = step.t
        resid[t - 1] = MomentAccumulator.of(step.x_next - np.sqrt(sched.alpha_bar(t - 1)) * x0)
        sample_norm[t] = MomentAccumulator.of(np.linalg.norm(step.raw.eps, axis=1))
        if want_train:
            if t == grid.T:
                train_norm[t] = MomentAccumulator.of(np.linalg.norm(step.raw.eps, axis=1))
            else:
                xt = sched.q_sample(x0, t, fwd.normal(t, x0.shape))
                pred = denoiser(xt, grid.parent_t(t), anchor=x0, rng=oracle.at(t))
                train_norm[t] = MomentAccumulator.of(np.linalg.norm(pred.eps, axis=1))
    return resid, sample_norm, train_norm


def _merge_dicts(parts: list[dict[int, MomentAccumulator]]) -> dict[int, MomentAccumulator]:
    out: dict[int, MomentAccumulator] = {}
    for part in parts:
        for t, acc in part.items():
            out.setdefault(t, MomentAccumulator()).merge(acc)
    return out


def _anchored_run(denoiser, data_sampler, config, n_chains, threads, want_train):
    if n_chains < MIN_CHAINS:
        raise ValueError(f"n_chains={n_chains} is below the minimum of {MIN_CHAINS}")
    parts = rngs.map_blocks(
        lambda b, s, e: _anchored_block(config, denoiser, data_sampler, b, s, e, want_train),
        n_chains, threads)
    return tuple(_merge_dicts([p[i] for p in parts]) for i in range(3))


def _multi_step_report(denoiser, data_sampler, config, n_chains, threads, want_train=False):
    resid, sample_norm, train_norm = _anchored_run(denoiser, data_sampler, config, n_chains,
                                                   threads, want_train)
    report = BiasReport.for_grid(config.grid)
    _fill_variance(report, resid)
    for t in resid:
        bv, tv, se = report.measured_var[t], report.train_var[t], report.measured_var_se[t]
        report.multi_err[t] = bv - tv
        report.multi_err_se[t] = se
        report.delta[t] = frechet_gap_1d(bv, tv)
        report.delta_se[t] = abs(math.sqrt(bv) - math.sqrt(tv)) / math.sqrt(bv) * se if bv > 0 else se
    for t, acc in sample_norm.items():
        report.eps_norm_sample[t] = acc.mean
        report.eps_norm_sample_se[t] = acc.mean_se
    for t, acc in train_norm.items():
        report.eps_norm_train[t] = acc.mean
        report.eps_norm_train_se[t] = acc.mean_se
        report.norm_ratio[t] = report.eps_norm_sample[t] / acc.mean
    report.meta.update(kind=config.kind, n_chains=n_chains, seed=config.seed)
    return report


def measure_delta_t(denoiser: Denoiser, data_sampler: DataSampler, sampler_config: SamplerConfig,
                    n_chains: int, *, threads: int = 1) -> BiasReport:
    """Exposure bias delta_t from anchored chains (pooled residual variance per step)."""
    return _multi_step_report(denoiser, data_sampler, sampler_config, n_chains, threads)


def measure_multi_step_error(denoiser: Denoiser, data_sampler: DataSampler,
                             sampler_config: SamplerConfig, n_chains: int, *,
                             threads: int = 1) -> BiasReport:
    """Signed multi-step variance error Delta'_t = beta_hat_t - (1 - alpha_bar_t)."""
    return _multi_step_report(denoiser, data_sampler, sampler_config, n_chains, threads)


def measure_eps_norms(denoiser: Denoiser, data_sampler: DataSampler, sampler_config: SamplerConfig,
                      n: int, *, threads: int = 1) -> BiasReport:
    """Mean |eps| on ground-truth inputs vs along sampling chains, and their ratio.

    At t = T' both curves use the same input x_T, so the ratio there is exactly 1.
    """
    return _multi_step_report(denoiser, data_sampler, sampler_config, n, threads, want_train=True)


def _short_run_block(config, denoiser, data_sampler, start_t, steps, block, lo, hi):
    grid = config.grid
    sched = grid.effective
    key = (start_t << 20) | block
    m = hi - lo
    x0 = np.asarray(data_sampler(rngs.stream(config.seed, key, rngs.DATA), m),
                    dtype=np.float64).reshape(m, -1)
    eps = rngs.stream(config.seed, key, rngs.FORWARD).standard_normal(x0.shape)
    x = sched.q_sample(x0, start_t, eps)
    it = iterate_chain(_truncated(config, start_t), denoiser, x, x0, key)
    for _ in range(steps):
        x = next(it).x_next
    end = start_t - steps
    return MomentAccumulator.of(x - np.sqrt(sched.alpha_bar(end)) * x0)


def _truncated(config: SamplerConfig, start_t: int) -> SamplerConfig:
    """A config whose grid stops at ``start_t``; alpha_bar values are untouched."""
    grid = config.grid
    if start_t == grid.T:
        return config
    eff = NoiseSchedule(grid.effective.betas[:start_t], grid.effective.sampling_var_choice)
    object.__setattr__(eff, "alpha_bars", grid.effective.alpha_bars[:start_t])
    object.__setattr__(eff, "posterior_vars", grid.effective.posterior_vars[:start_t])
    sub = RespacedSchedule(grid.parent, grid.timesteps[:start_t], eff)
    return SamplerConfig(config.kind, sub, config.eta, config.scaling, config.seed)


def measure_single_step_error(denoiser: Denoiser, data_sampler: DataSampler,
                              sampler_config: SamplerConfig, n: int, *, steps: int = 1,
                              threads: int = 1) -> BiasReport:
    """Delta_t from ``steps`` sampler steps started at the exact x_{t+steps}.

    Every start point draws its own x_0 and forward noise. With ``steps=1`` this
    is the single-step error; ``steps=2`` gives the two-step variance.
    """
    if n < MIN_CHAINS:
        raise ValueError(f"n={n} is below the minimum of {MIN_CHAINS}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    config = sampler_config
    grid = config.grid
    accs = {}
    for start_t in range(grid.T, steps - 1, -1):
        parts = rngs.map_blocks(
            lambda b, lo, hi, s=start_t: _short_run_block(config, denoiser, data_sampler, s,
                                                          steps, b, lo, hi),
            n, threads)
        accs[start_t - steps] = merge_all(parts)
    report = BiasReport.for_grid(grid)
    _fill_variance(report, accs)
    for t in accs:
        report.single_err[t] = report.measured_var[t] - report.train_var[t]
        report.single_err_se[t] = report.measured_var_se[t]
    report.meta.update(kind=config.kind, n=n, steps=steps, seed=config.seed)
    return report


def norm_ratio_series(report: BiasReport):
    from .scaling import NormRatioSeries

    ok = ~np.isnan(report.norm_ratio)
    return NormRatioSeries(report.t[ok], report.norm_ratio[ok], report.n[ok].astype(int))
