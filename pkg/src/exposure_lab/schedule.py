"""Discrete variance-preserving noise schedules and respacing."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "VarChoice",
    "NoiseSchedule",
    "RespacedSchedule",
    "make_linear_schedule",
    "default_linear_schedule",
    "respace",
    "as_respaced",
    "schedule_to_csv",
    "schedule_from_csv",
]


class VarChoice(str, enum.Enum):
    LOWER = "lower"  # posterior variance beta_tilde
    UPPER = "upper"  # forward variance beta


@dataclass(frozen=True)
class NoiseSchedule:
    """A T-step schedule. All public accessors take 1-based timesteps.

    ``alpha_bar(0)`` is 1 by convention, which makes ``posterior_var(1)`` zero
    so the last reverse step is noiseless.
    """

    betas: np.ndarray
    sampling_var_choice: VarChoice = VarChoice.LOWER
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_vars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior = (1.0 - prev) / (1.0 - alpha_bars) * betas
        for name, arr in (("betas", betas), ("alphas", alphas),
                          ("alpha_bars", alpha_bars), ("posterior_vars", posterior)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sampling_var_choice", VarChoice(self.sampling_var_choice))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self._check(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        return float(self.posterior_vars[self._check(t) - 1])

    def train_var(self, t: int) -> float:
        """Variance of q(x_t | x_0), i.e. 1 - alpha_bar_t."""
        return 1.0 - self.alpha_bar(t)

    def sampling_var(self, t: int) -> float:
        if self.sampling_var_choice is VarChoice.LOWER:
            return self.posterior_var(t)
        return self.beta(t)

    def with_var_choice(self, choice: VarChoice | str) -> NoiseSchedule:
        return NoiseSchedule(self.betas, VarChoice(choice))

    def q_sample(self, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar(t)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (self.sampling_var_choice == other.sampling_var_choice
                and np.array_equal(self.betas, other.betas))

    __hash__ = None


@dataclass(frozen=True)
class RespacedSchedule:
    """A T'-step sub-schedule of ``parent`` visiting ``timesteps`` (1-based, increasing)."""

    parent: NoiseSchedule
    timesteps: tuple[int, ...]
    effective: NoiseSchedule

    @property
    def T(self) -> int:
        return len(self.timesteps)

    def parent_t(self, i: int) -> int:
        """Parent timestep visited at grid index ``i`` (0 maps to 0)."""
        return 0 if i == 0 else self.timesteps[i - 1]


def make_linear_schedule(T: int, beta_start: float, beta_end: float,
                         sampling_var_choice: VarChoice | str = VarChoice.LOWER) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError("T must be an integer >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64),
                         VarChoice(sampling_var_choice))


def default_linear_schedule(T: int = 1000) -> NoiseSchedule:
    """Linear 1e-4..0.02 at T=1000, endpoints scaled by 1000/T otherwise."""
    scale = 1000.0 / T
    return make_linear_schedule(T, 1e-4 * scale, 0.02 * scale)


def _respaced_indices(T: int, T_prime: int) -> list[int]:
    picks = sorted({int(np.floor(j * T / T_prime + 0.5)) for j in range(1, T_prime + 1)})
    picks = [p for p in picks if 1 <= p <= T]
    if picks[-1] != T:
        picks.append(T)
    return picks


def respace(parent: NoiseSchedule, T_prime: int) -> RespacedSchedule:
    """Keep ``T_prime`` evenly spaced timesteps; the effective betas reproduce parent alpha_bars."""
    if int(T_prime) != T_prime or T_prime < 2:
        raise ValueError("T_prime must be an integer >= 2")
    if T_prime > parent.T:
        raise ValueError(f"T_prime={T_prime} exceeds parent T={parent.T}")
    steps = _respaced_indices(parent.T, int(T_prime))
    if len(steps) == parent.T:
        return RespacedSchedule(parent, tuple(steps), parent)
    ab = parent.alpha_bars[np.asarray(steps) - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / prev
    effective = NoiseSchedule(betas, parent.sampling_var_choice)
    # cumprod round-off would otherwise break exact alpha_bar equality
    object.__setattr__(effective, "alpha_bars", _frozen(ab))
    post = (1.0 - prev) / (1.0 - ab) * betas
    object.__setattr__(effective, "posterior_vars", _frozen(post))
    return RespacedSchedule(parent, tuple(steps), effective)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def as_respaced(schedule: NoiseSchedule | RespacedSchedule) -> RespacedSchedule:
    if isinstance(schedule, RespacedSchedule):
        return schedule
    return RespacedSchedule(schedule, tuple(range(1, schedule.T + 1)), schedule)


def schedule_to_csv(schedule: NoiseSchedule, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha_bar", "posterior_var"])
        for t in range(1, schedule.T + 1):
            w.writerow([t, repr(schedule.beta(t)), repr(schedule.alpha_bar(t)),
                        repr(schedule.posterior_var(t))])


def schedule_from_csv(path: str | Path) -> NoiseSchedule:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ts = [int(r["t"]) for r in rows]
    if ts != list(range(1, len(ts) + 1)):
        raise ValueError("schedule CSV must list t = 1..T in order")
    return NoiseSchedule(np.array([float(r["beta"]) for r in rows]))
