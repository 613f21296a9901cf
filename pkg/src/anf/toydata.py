"""Synthetic densities with exact sampling and exact log-density."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI, Rng, Tensor


class MixtureOfGaussians:
    """Diagonal-covariance Gaussian mixture in ``dim`` dimensions."""

    def __init__(self, weights, means, stds):
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        if self.means.shape[0] != self.weights.size:
            self.means = self.means.T
        stds = np.asarray(stds, dtype=float)
        self.stds = np.broadcast_to(stds.reshape(self.weights.size, -1), self.means.shape).copy()
        if abs(self.weights.sum() - 1.0) > 1e-12 or (self.weights < 0).any():
            raise ValueError("mixture weights must lie on the simplex")
        if (self.stds <= 0).any():
            raise ValueError("mixture stds must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def sample(self, n: int, rng: Rng, return_labels: bool = False):
        if n < 1:
            raise ValueError("n must be positive")
        k = rng.choice(self.n_components, n, p=self.weights)
        x = self.means[k] + self.stds[k] * rng.normal((n, self.dim))
        return (x, k) if return_labels else x

    def component_log_densities(self, x) -> np.ndarray:
        """``log w_k + log N(x; mu_k, sigma_k^2)`` as an ``(n, K)`` array."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = (x[:, None, :] - self.means[None]) / self.stds[None]
        per = -0.5 * z**2 - np.log(self.stds)[None] - 0.5 * LOG_2PI
        with np.errstate(divide="ignore"):
            return per.sum(-1) + np.log(self.weights)[None]

    def log_density(self, x) -> np.ndarray:
        c = self.component_log_densities(x)
        m = c.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(c - m).sum(axis=1, keepdims=True)))[:, 0]

    def log_density_tensor(self, x: Tensor) -> Tensor:
        """Differentiable log-density for use as a variational target."""
        x = ad.as_tensor(x)
        parts = []
        for k in range(self.n_components):
            lp = ad.gaussian_logpdf(x, self.means[k], np.log(self.stds[k]))
            parts.append(ad.reshape(ad.add(lp, math.log(self.weights[k])), (x.shape[0], 1)))
        return ad.logsumexp(ad.concat(parts, axis=-1), axis=-1)

    def assign(self, x) -> np.ndarray:
        """Most probable component for each point."""
        return self.component_log_densities(x).argmax(axis=1)

    def to_config(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
        }


def mog_sample(m: MixtureOfGaussians, n: int, rng: Rng) -> np.ndarray:
    return m.sample(n, rng)


def mog_log_density(m: MixtureOfGaussians, x) -> np.ndarray:
    return m.log_density(x)


def default_mog1d() -> MixtureOfGaussians:
    return MixtureOfGaussians([0.5, 0.5], [[-2.0], [2.0]], [[0.5], [0.5]])


def ring_of_gaussians(n: int = 8, radius: float = 2.0, std: float = 0.25) -> MixtureOfGaussians:
    angles = 2 * np.pi * np.arange(n) / n
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return MixtureOfGaussians(np.full(n, 1.0 / n), means, np.full((n, 2), std))


def two_component(dim: int = 2, offset: float = 2.0, stds=(0.5, 1.0)) -> MixtureOfGaussians:
    """Two anisotropic components at ``+-offset`` along the first axis."""
    means = np.zeros((2, dim))
    means[0, 0], means[1, 0] = -offset, offset
    sd = np.ones((2, dim))
    sd[0, :] = stds[0]
    sd[1, :] = stds[1]
    sd[0, 0], sd[1, 0] = stds[1], stds[0]
    return MixtureOfGaussians([0.5, 0.5], means, sd)


def vi_target() -> MixtureOfGaussians:
    """Normalized 2-D bimodal target for the variational-inference experiment."""
    return MixtureOfGaussians([0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [[0.5, 0.8], [0.5, 0.8]])


FAMILIES = {
    "mog1d": default_mog1d,
    "ring8": ring_of_gaussians,
    "twocomp2d": lambda: two_component(2),
    "twocomp4d": lambda: two_component(4),
    "vi2d": vi_target,
}


def make_dataset(family: str = "mog1d", weights=None, means=None, stds=None, dim=None):
    """Build a mixture from config keys; explicit parameters override the family."""
    if weights is not None or means is not None or stds is not None:
        if weights is None or means is None or stds is None:
            raise ValueError("weights, means and stds must be given together")
        m = MixtureOfGaussians(weights, means, stds)
    elif family in FAMILIES:
        m = FAMILIES[family]()
    else:
        raise ValueError(f"unknown data family {family!r}")
    if dim is not None and int(dim) != m.dim:
        raise ValueError(f"dataset dim {m.dim} does not match configured dim {dim}")
    return m
