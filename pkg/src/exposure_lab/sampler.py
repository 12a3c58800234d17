"""Reverse-process samplers with an epsilon-scaling hook.

Step functions work on grid indices of an (effective) schedule, with
alpha_bar(0) = 1. The denoiser is always queried at the parent timestep the
grid index maps to, so respaced sampling reuses a model trained on the full
schedule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngs
from .denoiser import Denoiser, EpsPrediction
from .scaling import ScalingSchedule, lambda_at
from .schedule import NoiseSchedule, RespacedSchedule, as_respaced

KINDS = ("ddpm", "ddim", "euler", "heun")


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    schedule: NoiseSchedule | RespacedSchedule
    eta: float = 0.0
    scaling: ScalingSchedule | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    @property
    def grid(self) -> RespacedSchedule:
        return as_respaced(self.schedule)

    def lam(self, t: int) -> float:
        return 1.0 if self.scaling is None else lambda_at(self.scaling, t)


def ddpm_step(x, t: int, eps: EpsPrediction, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Ancestral step using ``eps.eps``; the t=1 step ignores ``noise``."""
    if t < 1:
        raise ValueError("ddpm_step needs t >= 1")
    a, beta, ab = schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t)
    mean = (x - beta / np.sqrt(1.0 - ab) * eps.eps) / np.sqrt(a)
    if t == 1:
        return mean
    return mean + np.sqrt(schedule.sampling_var(t)) * noise


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    post = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
    return eta * np.sqrt(max(post, 0.0))


def ddim_step(x, t: int, t_prev: int, eps: EpsPrediction, eta: float,
              schedule: NoiseSchedule, noise) -> np.ndarray:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_prev = schedule.alpha_bar(t_prev)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    dir_var = 1.0 - ab_prev - sigma ** 2
    if dir_var < -1e-12:
        raise ValueError(f"negative direction variance at t={t}")
    out = np.sqrt(ab_prev) * eps.x0_hat + np.sqrt(max(dir_var, 0.0)) * eps.eps
    if sigma > 0:
        out = out + sigma * noise
    return out


class _Evaluator:
    """Calls the denoiser at a grid index and applies scaling."""

    def __init__(self, config: SamplerConfig, denoiser: Denoiser, anchor, block: int):
        self.config, self.denoiser, self.anchor = config, denoiser, anchor
        self.grid = config.grid
        self.oracle = rngs.StepStreams(config.seed, block, rngs.ORACLE)

    def __call__(self, x, i: int, slot: int = 0) -> tuple[EpsPrediction, EpsPrediction]:
        raw = self.denoiser(x, self.grid.parent_t(i), anchor=self.anchor,
                            rng=self.oracle.at(2 * i + slot))
        ab = self.grid.effective.alpha_bar(i)
        return raw, raw.scaled(self.config.lam(i), x, ab)


def euler_step(x, t: int, t_prev: int, evaluate, schedule: NoiseSchedule):
    """Deterministic DDIM(eta=0) step. Returns (next, [(raw, used)])."""
    raw, used = evaluate(x, t)
    return ddim_step(x, t, t_prev, used, 0.0, schedule, None), [(raw, used)]


def heun_step(x, t: int, t_prev: int, evaluate, schedule: NoiseSchedule):
    """Euler predictor, then re-step from x with the averaged eps.

    The final step (t_prev = 0) has no corrector since eps is undefined at t=0.
    """
    nxt, trace = euler_step(x, t, t_prev, evaluate, schedule)
    if t_prev == 0:
        return nxt, trace
    raw2, used2 = evaluate(nxt, t_prev, slot=1)
    avg = 0.5 * (trace[0][1].eps + used2.eps)
    pred = EpsPrediction.from_eps(x, schedule.alpha_bar(t), avg)
    return ddim_step(x, t, t_prev, pred, 0.0, schedule, None), trace + [(raw2, used2)]


@dataclass
class StepInfo:
    t: int
    x: np.ndarray  # state at t, before the step
    raw: EpsPrediction
    used: EpsPrediction
    corrector: tuple[EpsPrediction, EpsPrediction] | None
    noise: np.ndarray | None
    x_next: np.ndarray


def iterate_chain(config: SamplerConfig, denoiser: Denoiser, x_T: np.ndarray,
                  anchor: np.ndarray | None = None, block: int = 0) -> Iterator[StepInfo]:
    """Run one block of chains from ``x_T`` down to grid index 0, yielding every step."""
    if denoiser.needs_anchor and anchor is None:
        raise ValueError("this denoiser needs anchored chains")
    grid = config.grid
    sched = grid.effective
    evaluate = _Evaluator(config, denoiser, anchor, block)
    noise_streams = rngs.StepStreams(config.seed, block, rngs.SAMPLER)
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(grid.T, 0, -1):
        try:
            noise = None
            corrector = None
            if config.kind == "ddpm":
                raw, used = evaluate(x, t)
                noise = noise_streams.normal(t, x.shape) if t > 1 else np.zeros_like(x)
                nxt = ddpm_step(x, t, used, sched, noise)
            elif config.kind == "ddim":
                raw, used = evaluate(x, t)
                if ddim_sigma(sched, t, t - 1, config.eta) > 0:
                    noise = noise_streams.normal(t, x.shape)
                nxt = ddim_step(x, t, t - 1, used, config.eta, sched, noise)
            else:
                step = euler_step if config.kind == "euler" else heun_step
                nxt, trace = step(x, t, t - 1, evaluate, sched)
                raw, used = trace[0]
                corrector = trace[1] if len(trace) > 1 else None
        except ValueError as exc:
            raise ValueError(f"sampling failed at grid step t={t}: {exc}") from exc
        yield StepInfo(t, x, raw, used, corrector, noise, nxt)
        x = nxt


@dataclass
class ChainRecord:
    """Trajectories for a batch of chains; arrays are indexed [step, chain, dim].

    ``states[k]`` is the state at grid index ``timesteps[k]``; ``eps`` holds the
    (scaled) eps each update used, ``raw_eps`` the unscaled model output.
    """

    timesteps: np.ndarray
    states: np.ndarray
    eps: np.ndarray
    raw_eps: np.ndarray
    noise: np.ndarray
    corrector_eps: np.ndarray | None = None
    anchor_x0: np.ndarray | None = None
    seed: int = 0
    chain_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def n_chains(self) -> int:
        return self.states.shape[1]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def initial_state(config: SamplerConfig, block: int, n: int, dim: int,
                  anchor: np.ndarray | None = None) -> np.ndarray:
    """x_T from N(0, I) or, for anchored chains, from the forward process at T'."""
    grid = config.grid
    if anchor is None:
        return rngs.stream(config.seed, block, rngs.INIT).standard_normal((n, dim))
    eps = rngs.stream(config.seed, block, rngs.FORWARD, grid.T).standard_normal(anchor.shape)
    return grid.effective.q_sample(anchor, grid.T, eps)


def _run_block(config, denoiser, block, x_T, anchor, ids) -> ChainRecord:
    states, eps, raw, noise, corr = [x_T], [], [], [], []
    steps = list(iterate_chain(config, denoiser, x_T, anchor, block))
    for s in steps:
        states.append(s.x_next)
        eps.append(s.used.eps)
        raw.append(s.raw.eps)
        noise.append(np.zeros_like(s.x) if s.noise is None else s.noise)
        corr.append(s.corrector[1].eps if s.corrector is not None else np.full_like(s.x, np.nan))
    grid = config.grid
    return ChainRecord(
        timesteps=np.arange(grid.T, -1, -1),
        states=np.stack(states), eps=np.stack(eps), raw_eps=np.stack(raw),
        noise=np.stack(noise),
        corrector_eps=np.stack(corr) if config.kind == "heun" else None,
        anchor_x0=anchor, seed=config.seed, chain_ids=ids)


def run_chain(config: SamplerConfig, denoiser: Denoiser, *, n: int | None = None,
              anchor_x0: np.ndarray | None = None, dim: int | None = None,
              threads: int = 1, block_size: int = rngs.BLOCK_SIZE) -> ChainRecord:
    """Sample ``n`` free chains (x_T ~ N(0, I)) or one anchored chain per row of ``anchor_x0``."""
    if anchor_x0 is not None:
        anchor_x0 = np.atleast_2d(np.asarray(anchor_x0, dtype=np.float64))
        n, dim = anchor_x0.shape
    elif n is None:
        raise ValueError("give either n or anchor_x0")
    if dim is None:
        dim = getattr(denoiser, "dim", None) or getattr(getattr(denoiser, "spec", None), "dim", None)
        if dim is None:
            raise ValueError("cannot infer the state dimension; pass dim=")

    def work(block, start, stop):
        anchor = None if anchor_x0 is None else anchor_x0[start:stop]
        x_T = initial_state(config, block, stop - start, dim, anchor)
        return _run_block(config, denoiser, block, x_T, anchor, np.arange(start, stop))

    parts = rngs.map_blocks(work, n, threads, block_size)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts], axis=1)  # noqa: E731
    return ChainRecord(
        timesteps=parts[0].timesteps, states=cat("states"), eps=cat("eps"),
        raw_eps=cat("raw_eps"), noise=cat("noise"),
        corrector_eps=cat("corrector_eps") if config.kind == "heun" else None,
        anchor_x0=anchor_x0, seed=config.seed,
        chain_ids=np.concatenate([p.chain_ids for p in parts]))


def record_to_csv(record: ChainRecord, path: str | Path, header: str = "") -> None:
    """One row per (chain, visited t): chain_id, t, coordinates..., eps_norm."""
    dim = record.states.shape[2]
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh)
        w.writerow(["chain_id", "t", *[f"x{j}" for j in range(dim)], "eps_norm"])
        norms = np.linalg.norm(record.eps, axis=2)
        for c, cid in enumerate(record.chain_ids):
            for k, t in enumerate(record.timesteps):
                en = repr(float(norms[k, c])) if k < norms.shape[0] else ""
                w.writerow([int(cid), int(t), *map(repr, record.states[k, c].tolist()), en])
