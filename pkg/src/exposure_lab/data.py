"""Toy data distributions standing in for q(x_0)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianDataSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.ndim == 1:
            cov = np.diag(cov)
        cov = np.atleast_2d(cov)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, dim: int = 1) -> GaussianDataSpec:
        return cls(np.zeros(dim), np.eye(dim))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        w, v = np.linalg.eigh(self.covariance)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean + z @ root.T

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.covariance


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic-component mixture; ``means`` has shape (K, N)."""

    means: np.ndarray
    std: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = means.shape[0]
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (k,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a probability vector over components")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, self.dim))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.weights @ self.means
        d = self.means - mu
        cov = (self.weights[:, None] * d).T @ d + self.std ** 2 * np.eye(self.dim)
        return mu, cov


@dataclass(frozen=True)
class TwoMoons:
    noise: float = 0.1

    dim = 2

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        upper = rng.random(n) < 0.5
        theta = np.pi * rng.random(n)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x - 0.5, y - 0.25], axis=1)
        return pts + self.noise * rng.standard_normal((n, 2))

    def moments(self, n: int = 200_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        pts = self.sample(np.random.default_rng(seed), n)
        return pts.mean(axis=0), np.cov(pts, rowvar=False)


def make_data(name: str, dim: int = 1, **kw):
    """Build a toy distribution by name: gaussian, mixture1d, mixture2d, moons."""
    if name == "gaussian":
        return GaussianDataSpec.standard(dim)
    if name == "mixture1d":
        return GaussianMixture([[-2.0], [2.0]], kw.get("std", 0.1))
    if name == "mixture2d":
        return GaussianMixture([[-1.0, -1.0], [1.0, 1.0]], kw.get("std", 0.3))
    if name == "moons":
        return TwoMoons(kw.get("std", 0.1))
    raise ValueError(f"unknown data distribution {name!r}")
