"""Tiny fully connected eps-network with hand-written backprop.

Input is concat(x, t/T); hidden layers use SiLU. Training minimises the
standard eps-prediction loss with RMSProp (adaptive, no momentum).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser import EpsPrediction
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class MLP:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator) -> MLP:
        ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            ws.append(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> MLP:
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, h: np.ndarray, keep: bool = False):
        pre, acts = [], [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else silu(z)
            if keep:
                pre.append(z)
                acts.append(h)
        return (h, pre, acts) if keep else h

    def backward(self, pre, acts, dout):
        """Gradients of sum(dout * output) w.r.t. every parameter, in params() order."""
        grads = []
        g = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * silu_grad(pre[i])
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            if i:
                g = g @ self.weights[i].T
        return grads[::-1]


class MlpDenoiser:
    needs_anchor = False

    def __init__(self, net: MLP, schedule: NoiseSchedule):
        if net.widths[0] != net.widths[-1] + 1:
            raise ValueError("network input must be state dimension + 1 (time feature)")
        self.net, self.schedule = net, schedule

    @property
    def dim(self) -> int:
        return self.net.widths[-1]

    def features(self, x: np.ndarray, t) -> np.ndarray:
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64) / self.schedule.T, (x.shape[0],))
        return np.concatenate([x, tt[:, None]], axis=1)

    def __call__(self, x, t, *, anchor=None, rng=None) -> EpsPrediction:
        return mlp_eps(self, x, t)


def mlp_eps(model: MlpDenoiser, x, t: int) -> EpsPrediction:
    t = model.schedule._check(t)
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if xb.shape[1] != model.dim:
        raise ValueError(f"state dimension {xb.shape[1]} != model dimension {model.dim}")
    eps = model.net.forward(model.features(xb, t))
    return EpsPrediction.from_eps(xb, model.schedule.alpha_bar(t), eps)


@dataclass
class TrainConfig:
    steps: int = 20_000
    batch: int = 256
    lr: float = 2e-3
    final_lr: float = 1e-4
    decay: float = 0.99
    hidden: tuple[int, ...] = (64, 64, 64)
    seed: int = 0
    log_every: int = 100


@dataclass
class TrainResult:
    model: MlpDenoiser
    initial_loss: float
    final_loss: float
    curve: list[tuple[int, float]] = field(default_factory=list)


def train_mlp(data_sampler: Callable[[np.random.Generator, int], np.ndarray],
              schedule: NoiseSchedule, dim: int, cfg: TrainConfig | None = None) -> TrainResult:
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    net = MLP.init([dim + 1, *cfg.hidden, dim], rng)
    model = MlpDenoiser(net, schedule)
    params = net.params()
    sq = [np.zeros_like(p) for p in params]
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)

    curve: list[tuple[int, float]] = []
    window: list[float] = []
    initial = final = float("nan")
    for step in range(1, cfg.steps + 1):
        x0 = data_sampler(rng, cfg.batch)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch)
        noise = rng.standard_normal(x0.shape)
        xt = sqrt_ab[t - 1, None] * x0 + sqrt_1mab[t - 1, None] * noise
        inp = np.concatenate([xt, (t / schedule.T)[:, None]], axis=1)
        out, pre, acts = net.forward(inp, keep=True)
        diff = out - noise
        loss = float(np.mean(diff ** 2))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if step == 1:
            initial = loss
        grads = net.backward(pre, acts, 2.0 * diff / diff.size)
        frac = (step - 1) / max(cfg.steps - 1, 1)
        lr = cfg.lr * (cfg.final_lr / cfg.lr) ** frac
        for p, g, s in zip(params, grads, sq):
            s *= cfg.decay
            s += (1.0 - cfg.decay) * g * g
            p -= lr * g / (np.sqrt(s) + 1e-8)
        window.append(loss)
        if step % cfg.log_every == 0 or step == cfg.steps:
            final = float(np.mean(window))
            curve.append((step, final))
            window.clear()
    if cfg.steps:
        log.info("trained %d steps: loss %.4f -> %.4f", cfg.steps, initial, final)
    return TrainResult(model, initial, final, curve)


def write_loss_curve(curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in curve:
            w.writerow([step, repr(loss)])


def save_weights(model: MlpDenoiser, path: str | Path) -> None:
    """Text format: version header, then one row per parameter (name, rows, cols, values...)."""
    net = model.net
    with open(path, "w", newline="") as fh:
        fh.write(f"# exposure-lab mlp weights v{FORMAT_VERSION}\n")
        fh.write(f"# widths={'-'.join(map(str, net.widths))} activation=silu T={model.schedule.T}\n")
        w = csv.writer(fh)
        for i, (wt, b) in enumerate(zip(net.weights, net.biases)):
            w.writerow([f"W{i}", *wt.shape, *map(repr, wt.ravel().tolist())])
            w.writerow([f"b{i}", 1, b.size, *map(repr, b.tolist())])


def load_weights(path: str | Path, schedule: NoiseSchedule) -> MlpDenoiser:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# exposure-lab mlp weights v"):
        raise ValueError(f"{path}: not an mlp weight file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    meta = dict(kv.split("=", 1) for kv in lines[1][2:].split())
    if int(meta["T"]) != schedule.T:
        raise ValueError(f"{path}: weights trained for T={meta['T']}, schedule has T={schedule.T}")
    ws, bs = [], []
    for row in csv.reader(lines[2:]):
        name, r, c = row[0], int(row[1]), int(row[2])
        arr = np.array([float(v) for v in row[3:]]).reshape(r, c)
        (ws if name.startswith("W") else bs).append(arr if name.startswith("W") else arr[0])
    return MlpDenoiser(MLP(ws, bs), schedule)
