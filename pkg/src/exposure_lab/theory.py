"""Closed-form sampling variances and an exact linear-Gaussian chain propagator.

The single and two-step variance formulas are coded directly. The chain
propagator tracks every state as an affine map of (x_0, independent standard
normals). That is exact whenever the predictor is affine in its input plus
Gaussian error, which covers every non-MLP predictor in ``denoiser``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import GaussianDataSpec
from .denoiser import ErrorProfile, _posterior_gain
from .scaling import ScalingSchedule, lambda_at
from .schedule import NoiseSchedule, RespacedSchedule, as_respaced


@dataclass(frozen=True)
class VariancePrediction:
    """Predicted residual variance of the sampled state at timestep ``t``."""

    t: int
    train_var: float
    sampled_var: float
    extra_term: float
    marginal_var: float = math.nan


def _eff(schedule) -> NoiseSchedule:
    return schedule.effective if isinstance(schedule, RespacedSchedule) else schedule


def _range(s: NoiseSchedule, t: int, lo: int) -> None:
    if not lo <= t < s.T:
        raise ValueError(f"t={t} outside [{lo}, {s.T - 1}]")


def _prediction(t, train, extra) -> VariancePrediction:
    return VariancePrediction(t, train, train + extra, extra)


def ddpm_single_step_var(schedule, t: int, e_next: float) -> VariancePrediction:
    s = _eff(schedule)
    _range(s, t, 1)
    ab, ab1, b1 = s.alpha_bar(t), s.alpha_bar(t + 1), s.beta(t + 1)
    return _prediction(t, 1.0 - ab, (math.sqrt(ab) * b1 / (1.0 - ab1) * e_next) ** 2)


def ddpm_two_step_var(schedule, t: int, e: float) -> VariancePrediction:
    """Variance of x_{t-1} after two DDPM steps from the exact x_{t+1} (Taylor form).

    The returned prediction is indexed by the state's timestep, ``t - 1``.
    """
    s = _eff(schedule)
    _range(s, t, 2)
    ab_m, ab, ab1 = s.alpha_bar(t - 1), s.alpha_bar(t), s.alpha_bar(t + 1)
    f = (math.sqrt(ab) * s.beta(t + 1) / (1.0 - ab1) * e) ** 2
    first = (math.sqrt(ab_m) * s.beta(t) / (1.0 - ab) * e) ** 2
    second = s.alpha(t) * (1.0 - ab_m) ** 2 / (4.0 * (1.0 - ab) ** 3) * f ** 2
    return _prediction(t - 1, 1.0 - ab_m, first + second)


def ddim_coefficient(schedule, t: int) -> float:
    """(1 - sqrt((alpha_{t+1} - alpha_bar_{t+1}) / (1 - alpha_bar_{t+1})))^2 * alpha_bar_t."""
    s = _eff(schedule)
    a1, ab1 = s.alpha(t + 1), s.alpha_bar(t + 1)
    return (1.0 - math.sqrt((a1 - ab1) / (1.0 - ab1))) ** 2 * s.alpha_bar(t)


def ddim_single_step_var(schedule, t: int, e_next: float) -> VariancePrediction:
    s = _eff(schedule)
    _range(s, t, 1)
    return _prediction(t, 1.0 - s.alpha_bar(t), ddim_coefficient(s, t) * e_next ** 2)


class _Affine:
    """x = A @ x0 + c + L @ z with z a growing vector of independent standard normals."""

    __slots__ = ("A", "c", "L")

    def __init__(self, A, c, L):
        self.A, self.c, self.L = A, c, L

    def widen(self, k: int) -> _Affine:
        if self.L.shape[1] < k:
            self.L = np.pad(self.L, ((0, 0), (0, k - self.L.shape[1])))
        return self

    def lin(self, a, other: _Affine | None = None, b=0.0) -> _Affine:
        """a * self + b * other, with ``a``/``b`` scalars or matrices."""
        mul = lambda m, v: m @ v if np.ndim(m) == 2 else m * v  # noqa: E731
        if other is None:
            return _Affine(mul(a, self.A), mul(a, self.c), mul(a, self.L))
        k = max(self.L.shape[1], other.L.shape[1])
        self.widen(k), other.widen(k)
        return _Affine(mul(a, self.A) + mul(b, other.A), mul(a, self.c) + mul(b, other.c),
                       mul(a, self.L) + mul(b, other.L))


class _ChainAlgebra:
    def __init__(self, dim: int):
        self.dim = dim
        self.k = 0

    def fresh(self, scale: float) -> _Affine:
        """``scale`` times a new independent N(0, I) vector."""
        n = self.dim
        L = np.zeros((n, self.k + n))
        L[:, self.k:] = scale * np.eye(n)
        self.k += n
        return _Affine(np.zeros((n, n)), np.zeros(n), L)

    def const_x0(self, scale: float) -> _Affine:
        return _Affine(scale * np.eye(self.dim), np.zeros(self.dim), np.zeros((self.dim, self.k)))


def _pooled(mean: np.ndarray, cov: np.ndarray) -> float:
    """numpy.var over all coordinates of a Gaussian vector population."""
    return float(np.mean(np.diag(cov)) + np.mean((mean - mean.mean()) ** 2))


def gaussian_chain_var(spec: GaussianDataSpec, schedule, kind: str = "ddpm", *,
                       predictor: str = "analytic", error: ErrorProfile | None = None,
                       eta: float = 0.0, scaling: ScalingSchedule | None = None,
                       start: int | None = None, steps: int | None = None) -> list[VariancePrediction]:
    """Exact residual variance of x_hat_t - sqrt(alpha_bar_t) x_0 along an anchored chain.

    The chain starts from the exact forward sample at grid index ``start``
    (default T') and takes ``steps`` steps (default: down to 0). ``predictor`` is
    ``analytic``, ``noisy`` (oracle anchored at the true x_0) or ``perturbed``.
    The sampler ``kind`` is ddpm, ddim, euler or heun. Returns one prediction per
    visited state, starting state first.
    """
    if not isinstance(spec, GaussianDataSpec):
        raise TypeError("the exact chain oracle needs Gaussian data")
    if predictor not in ("analytic", "noisy", "perturbed"):
        raise ValueError(f"unknown predictor {predictor!r}")
    grid = as_respaced(schedule)
    s = grid.effective
    error = error or ErrorProfile()
    start = grid.T if start is None else start
    steps = start if steps is None else steps
    if not 1 <= steps <= start <= grid.T:
        raise ValueError("need 1 <= steps <= start <= T'")
    n = spec.dim
    alg = _ChainAlgebra(n)
    eye = np.eye(n)

    def predict(x: _Affine, t: int, lam: float) -> _Affine:
        ab = s.alpha_bar(t)
        e = error(grid.parent, grid.parent_t(t))
        if predictor == "noisy":
            x0_hat = alg.const_x0(1.0)
        else:
            gain = _posterior_gain(spec, ab)
            x0_hat = x.lin(gain)
            x0_hat.c = x0_hat.c + (eye - math.sqrt(ab) * gain) @ spec.mean
        if predictor != "analytic" and e > 0:
            x0_hat = x0_hat.lin(1.0, alg.fresh(e), 1.0)
        eps = x.lin(1.0 / math.sqrt(1.0 - ab), x0_hat, -math.sqrt(ab) / math.sqrt(1.0 - ab))
        return eps.lin(1.0 / lam)

    def lam(t):
        return 1.0 if scaling is None else lambda_at(scaling, t)

    def ddim(x: _Affine, eps: _Affine, t: int, t_prev: int, eta_: float) -> _Affine:
        ab, ab_p = s.alpha_bar(t), s.alpha_bar(t_prev)
        post = (1.0 - ab_p) / (1.0 - ab) * (1.0 - ab / ab_p)
        sigma = eta_ * math.sqrt(max(post, 0.0))
        a = math.sqrt(ab_p) / math.sqrt(ab)
        b = math.sqrt(max(1.0 - ab_p - sigma ** 2, 0.0)) - math.sqrt(ab_p) * math.sqrt(1.0 - ab) / math.sqrt(ab)
        out = x.lin(a, eps, b)
        if sigma > 0:
            out = out.lin(1.0, alg.fresh(sigma), 1.0)
        return out

    ab0 = s.alpha_bar(start)
    x = alg.const_x0(math.sqrt(ab0)).lin(1.0, alg.fresh(math.sqrt(1.0 - ab0)), 1.0)
    mu0, cov0 = spec.mean, spec.covariance

    def summarize(x: _Affine, t: int) -> VariancePrediction:
        ab = s.alpha_bar(t)
        rA = x.A - math.sqrt(ab) * eye
        LL = x.L @ x.L.T
        r_cov = rA @ cov0 @ rA.T + LL
        r_mean = rA @ mu0 + x.c
        m_cov = x.A @ cov0 @ x.A.T + LL
        m_mean = x.A @ mu0 + x.c
        sampled = _pooled(r_mean, r_cov)
        train = 1.0 - ab
        return VariancePrediction(t, train, sampled, sampled - train, _pooled(m_mean, m_cov))

    out = [summarize(x, start)]
    for t in range(start, start - steps, -1):
        eps = predict(x, t, lam(t))
        if kind == "ddpm":
            a, beta, ab = s.alpha(t), s.beta(t), s.alpha_bar(t)
            x_new = x.lin(1.0 / math.sqrt(a), eps, -beta / (math.sqrt(a) * math.sqrt(1.0 - ab)))
            if t > 1:
                x_new = x_new.lin(1.0, alg.fresh(math.sqrt(s.sampling_var(t))), 1.0)
        elif kind in ("ddim", "euler"):
            x_new = ddim(x, eps, t, t - 1, eta if kind == "ddim" else 0.0)
        elif kind == "heun":
            x_pred = ddim(x, eps, t, t - 1, 0.0)
            if t - 1 == 0:
                x_new = x_pred
            else:
                eps2 = predict(x_pred, t - 1, lam(t - 1))
                x_new = ddim(x, eps.lin(0.5, eps2, 0.5), t, t - 1, 0.0)
        else:
            raise ValueError(f"unknown sampler kind {kind!r}")
        x = x_new
        out.append(summarize(x, t - 1))
    return out
