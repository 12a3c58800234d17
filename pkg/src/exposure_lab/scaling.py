"""Epsilon-scaling schedules and their recovery from measured norm ratios.

The accumulation model links a per-step scaling lambda_u to the norm ratio
g(t) = |eps_sample| / |eps_train| observed at step t:

    g(t) - 1 = sum_{u=t+1}^{T'} (lambda_u - 1) * (u - t)

so the second difference g(t) - 2 g(t+1) + g(t+2) equals lambda_{t+1} - 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNIFORM_THRESHOLD = 0.002


@dataclass(frozen=True)
class ScalingSchedule:
    """lambda(t) = k*t + b on grid indices 1..T' (``k == 0`` is the uniform form)."""

    b: float = 1.0
    k: float = 0.0
    T: int | None = None

    def __post_init__(self):
        if self.T is not None:
            lo = min(self.k + self.b, self.k * self.T + self.b)
            if lo <= 0:
                raise ValueError("lambda(t) must be positive on the whole grid")
        elif self.k == 0 and self.b <= 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def uniform(cls, b: float, T: int | None = None) -> ScalingSchedule:
        return cls(b=float(b), k=0.0, T=T)

    @classmethod
    def linear(cls, k: float, b: float, T: int | None = None) -> ScalingSchedule:
        return cls(b=float(b), k=float(k), T=T)

    @property
    def form(self) -> str:
        return "uniform" if self.k == 0 else "linear"

    @property
    def is_identity(self) -> bool:
        return self.k == 0 and self.b == 1.0

    def __call__(self, t: int) -> float:
        return lambda_at(self, t)


def lambda_at(s: ScalingSchedule, t: int) -> float:
    if s.T is not None and not 1 <= t <= s.T:
        raise ValueError(f"t={t} outside the schedule domain 1..{s.T}")
    if s.k == 0:
        return s.b
    return s.k * t + s.b


@dataclass(frozen=True)
class NormRatioSeries:
    """Ratios g(t) for t = t_start..T' in order."""

    t: np.ndarray
    values: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=int)
        v = np.asarray(self.values, dtype=np.float64)
        n = np.broadcast_to(np.asarray(self.n_samples, dtype=int), t.shape).copy()
        if t.shape != v.shape:
            raise ValueError("t and values must have the same length")
        if t.size and np.any(np.diff(t) != 1):
            raise ValueError("timesteps must be consecutive and increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "n_samples", n)

    @property
    def T(self) -> int:
        return int(self.t[-1])


def forward_accumulate(lambdas, T: int | None = None) -> NormRatioSeries:
    """Norm ratios g(t), t = 1..T', implied by per-step scalings.

    ``lambdas`` is a ScalingSchedule (needs ``T``) or a sequence lambda_1..lambda_T'.
    """
    if isinstance(lambdas, ScalingSchedule):
        T = T or lambdas.T
        if T is None:
            raise ValueError("a grid length is required")
        lam = np.array([lambda_at(lambdas, u) for u in range(1, T + 1)])
    else:
        lam = np.asarray(lambdas, dtype=np.float64)
        T = lam.size
    c = lam - 1.0
    u = np.arange(1, T + 1)
    g = np.array([1.0 + np.sum(c[u > t] * (u[u > t] - t)) for t in range(1, T + 1)])
    return NormRatioSeries(np.arange(1, T + 1), g, 0)


def _second_difference_lambda(poly, T: int) -> np.ndarray:
    """lambda_u for u = 1..T from a smooth model of g(t) - 1 (accepts any real t)."""
    t = np.arange(0, T, dtype=np.float64)
    return 1.0 + poly(t) - 2.0 * poly(t + 1) + poly(t + 2)


def invert_norm_ratio(g: NormRatioSeries, t_min: int = 5,
                      threshold: float = UNIFORM_THRESHOLD) -> ScalingSchedule:
    """Fit g(t) - 1 with a zero-intercept cubic in (T' - t) and invert by second differences.

    A linear lambda accumulates into a cubic, so the fitted cubic inverts to an
    exactly linear lambda(t) = k t + b. Collapses to a uniform schedule (mean
    lambda over the grid) when |k| * T' < ``threshold``.
    """
    T = g.T
    keep = g.t >= t_min
    t = g.t[keep].astype(np.float64)
    if t.size < 4:
        raise ValueError(f"need at least 4 ratios with t >= {t_min}, got {t.size}")
    m = T - t
    design = np.stack([m ** 3, m ** 2, m], axis=1)
    coef, *_ = np.linalg.lstsq(design, g.values[keep] - 1.0, rcond=None)

    def poly(tt):
        mm = T - tt
        return coef[0] * mm ** 3 + coef[1] * mm ** 2 + coef[2] * mm

    lam = _second_difference_lambda(poly, T)
    k = float(lam[1] - lam[0])
    b = float(lam[0] - k)
    if abs(k) * T < threshold:
        out = ScalingSchedule.uniform(float(lam.mean()))
    else:
        out = ScalingSchedule.linear(k, b)
    if min(lambda_at(out, 1), lambda_at(out, T)) <= 0:
        raise ValueError("fitted lambda(t) is not positive on the grid")
    return ScalingSchedule(out.b, out.k, T)


def ratios_to_csv(g: NormRatioSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ratio", "n_samples"])
        for t, v, n in zip(g.t, g.values, g.n_samples):
            w.writerow([int(t), repr(float(v)), int(n)])


def ratios_from_csv(path: str | Path) -> NormRatioSeries:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    return NormRatioSeries([int(r["t"]) for r in rows], [float(r["ratio"]) for r in rows],
                           [int(r["n_samples"]) for r in rows])
