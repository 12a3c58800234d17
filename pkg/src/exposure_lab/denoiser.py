"""Epsilon predictors over toy data.

Every predictor is called as ``denoiser(x, t, anchor=..., rng=...)`` with a batch
``x`` of shape (n, N) and a timestep ``t`` of the schedule it was built on. The
return value carries both the predicted noise and the implied x_0 estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .data import GaussianDataSpec
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class EpsPrediction:
    eps: np.ndarray
    x0_hat: np.ndarray

    @classmethod
    def from_eps(cls, x: np.ndarray, alpha_bar: float, eps: np.ndarray) -> EpsPrediction:
        return cls(eps, (x - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar))

    @classmethod
    def from_x0(cls, x: np.ndarray, alpha_bar: float, x0_hat: np.ndarray) -> EpsPrediction:
        return cls((x - np.sqrt(alpha_bar) * x0_hat) / np.sqrt(1.0 - alpha_bar), x0_hat)

    def scaled(self, lam: float, x: np.ndarray, alpha_bar: float) -> EpsPrediction:
        """Divide eps by ``lam`` and re-derive x0_hat from the scaled eps."""
        if lam == 1.0:
            return self
        return EpsPrediction.from_eps(x, alpha_bar, self.eps / lam)


class Denoiser(Protocol):
    schedule: NoiseSchedule
    needs_anchor: bool

    def __call__(self, x: np.ndarray, t: int, *, anchor: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> EpsPrediction: ...


def _as_batch(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _posterior_gain(spec: GaussianDataSpec, ab: float) -> np.ndarray:
    n = spec.dim
    m = ab * spec.covariance + (1.0 - ab) * np.eye(n)
    # G = sqrt(ab) * Sigma @ inv(m); m is symmetric so solve against it
    return np.sqrt(ab) * np.linalg.solve(m, spec.covariance).T


def analytic_eps(spec: GaussianDataSpec, schedule: NoiseSchedule, x, t: int) -> EpsPrediction:
    """Exact posterior-mean predictor for Gaussian data."""
    ab = schedule.alpha_bar(schedule._check(t))
    xb = _as_batch(x)
    if xb.shape[-1] != spec.dim:
        raise ValueError(f"state dimension {xb.shape[-1]} != data dimension {spec.dim}")
    gain = _posterior_gain(spec, ab)
    x0_hat = spec.mean + (xb - np.sqrt(ab) * spec.mean) @ gain.T
    return EpsPrediction.from_x0(xb, ab, x0_hat)


@dataclass(frozen=True)
class ErrorProfile:
    """e_t as ``c`` (constant) or ``c * sqrt(1 - alpha_bar_t)`` (proportional)."""

    kind: str = "constant"
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "proportional"):
            raise ValueError(f"unknown error profile {self.kind!r}")
        if self.c < 0:
            raise ValueError("error scale must be non-negative")

    def __call__(self, schedule: NoiseSchedule, t: int) -> float:
        if self.kind == "constant":
            return self.c
        return self.c * np.sqrt(schedule.train_var(t))


@dataclass(frozen=True)
class NoisyOracleConfig:
    error_profile: ErrorProfile = field(default_factory=ErrorProfile)
    fresh_noise_seed_stream: int = 0


def noisy_oracle_eps(x0_true, cfg: NoisyOracleConfig, schedule: NoiseSchedule, x, t: int,
                     rng: np.random.Generator) -> EpsPrediction:
    """x0_hat = x0_true + e_t * zeta with fresh standard-normal zeta."""
    t = schedule._check(t)
    xb = _as_batch(x)
    x0 = np.broadcast_to(_as_batch(x0_true), xb.shape)
    e = cfg.error_profile(schedule, t)
    x0_hat = x0 + e * rng.standard_normal(xb.shape) if e > 0 else np.array(x0, dtype=np.float64)
    return EpsPrediction.from_x0(xb, schedule.alpha_bar(t), x0_hat)


class AnalyticDenoiser:
    needs_anchor = False

    def __init__(self, spec: GaussianDataSpec, schedule: NoiseSchedule):
        self.spec, self.schedule = spec, schedule

    def __call__(self, x, t, *, anchor=None, rng=None) -> EpsPrediction:
        return analytic_eps(self.spec, self.schedule, x, t)


class NoisyOracle:
    """Ground-truth-anchored predictor; only usable where each chain knows its x_0."""

    needs_anchor = True

    def __init__(self, cfg: NoisyOracleConfig, schedule: NoiseSchedule):
        self.cfg, self.schedule = cfg, schedule
        self._rng = np.random.default_rng(cfg.fresh_noise_seed_stream)

    def __call__(self, x, t, *, anchor=None, rng=None) -> EpsPrediction:
        if anchor is None:
            raise ValueError("the noisy oracle needs the chain's ground-truth x_0")
        return noisy_oracle_eps(anchor, self.cfg, self.schedule, x, t,
                                self._rng if rng is None else rng)


class PerturbedAnalytic:
    """Posterior mean plus e_t * zeta; runs without an anchor."""

    needs_anchor = False

    def __init__(self, spec: GaussianDataSpec, cfg: NoisyOracleConfig, schedule: NoiseSchedule):
        self.spec, self.cfg, self.schedule = spec, cfg, schedule
        self._rng = np.random.default_rng(cfg.fresh_noise_seed_stream)

    def __call__(self, x, t, *, anchor=None, rng=None) -> EpsPrediction:
        base = analytic_eps(self.spec, self.schedule, x, t)
        e = self.cfg.error_profile(self.schedule, t)
        if e == 0:
            return base
        rng = self._rng if rng is None else rng
        x0_hat = base.x0_hat + e * rng.standard_normal(base.x0_hat.shape)
        return EpsPrediction.from_x0(_as_batch(x), self.schedule.alpha_bar(t), x0_hat)


class ConstantEps:
    """Returns the same eps everywhere; a degenerate predictor for solver tests."""

    needs_anchor = False

    def __init__(self, value, schedule: NoiseSchedule):
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.schedule = schedule

    def __call__(self, x, t, *, anchor=None, rng=None) -> EpsPrediction:
        xb = _as_batch(x)
        return EpsPrediction.from_eps(xb, self.schedule.alpha_bar(t),
                                      np.broadcast_to(self.value, xb.shape).copy())
