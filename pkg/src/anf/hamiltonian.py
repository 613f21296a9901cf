"""Numerical laboratory for the Hamiltonian transport ODE and its additive-flow discretization.

Dynamics, with ``p`` the standard normal and ``q_t`` the law of ``x_t``::

    dx/dt = (2 / t^3) e
    de/dt = -2 t^3 grad log(q_t(x) / p(x))

For a Gaussian initial law and quadratic potential (``e_0 = c_phi x_0``) the
dynamics are linear in the particle state, so ``q_t`` stays Gaussian and its
moments obey a closed ODE; :func:`evolve_moments` integrates that ODE and
serves as the oracle for ``q_t``.

The leapfrog scheme alternates additive updates of ``e`` given ``x`` (encoding)
and of ``x`` given ``e`` (decoding), so each step is an additive coupling pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.integrate import solve_ivp

from .autodiff import Rng


@dataclass(frozen=True)
class OdeSpec:
    """Gaussian initial law ``N(mu0, sigma0^2)`` per dimension, ``e_0 = c_phi * x_0``."""

    mu0: float = 2.0
    sigma0: float = 0.5
    c_phi: float = 0.0
    dim: int = 1


@dataclass(frozen=True)
class IntegratorConfig:
    """Horizon ``T`` split into ``N`` leapfrog steps of width ``2 * eps``, starting at ``t_start``."""

    T: float
    N: int
    t_start: float = 0.1

    def __post_init__(self):
        if self.T <= 0 or self.N < 1 or self.t_start <= 0:
            raise ValueError("need T > 0, N >= 1 and t_start > 0")

    @property
    def eps(self) -> float:
        return self.T / (2 * self.N)

    @property
    def t_end(self) -> float:
        return self.t_start + self.T


def scaling(t: float) -> tuple[float, float, float]:
    """``(alpha_t, beta_t, gamma_t) = (log(2/t), log t^2, log t^2)``."""
    if t <= 0:
        raise ValueError("scaling coefficients need t > 0")
    return math.log(2.0 / t), math.log(t * t), math.log(t * t)


def f_coef(t: float) -> float:
    """``exp(alpha_t - gamma_t) = 2 / t^3``."""
    if t <= 0:
        raise ValueError("t must be positive")
    return 2.0 / t**3


def g_coef(t: float) -> float:
    """``exp(alpha_t + beta_t + gamma_t) = 2 t^3``."""
    if t <= 0:
        raise ValueError("t must be positive")
    return 2.0 * t**3


def f_deriv(e, t: float) -> np.ndarray:
    """Time derivative of ``x``: ``(2 / t^3) e``."""
    return f_coef(t) * np.asarray(e, dtype=float)


def g_deriv(x, t: float, mu, sigma) -> np.ndarray:
    """Time derivative of ``e`` for Gaussian ``q_t = N(mu, sigma^2)``.

    ``grad log(q_t/p)(x) = -(x - mu) / sigma^2 + x``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    return -g_coef(t) * (-(x - mu) / sigma**2 + x)


# -- moment oracle ------------------------------------------------------------


@dataclass(frozen=True)
class MomentState:
    t: float
    mean_x: np.ndarray
    mean_e: np.ndarray
    var_x: np.ndarray
    cov_xe: np.ndarray
    var_e: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var_x)


def _moment_rhs(t, s):
    mx, me, sxx, sxe, see = s.reshape(5, -1)
    k1, k2 = f_coef(t), g_coef(t)
    a = 1.0 - 1.0 / sxx
    return np.concatenate([k1 * me, -k2 * mx, 2 * k1 * sxe, k1 * see - k2 * a * sxx, -2 * k2 * a * sxe])


class MomentTrajectory:
    """Dense solution of the moment ODE; call with ``t`` for a :class:`MomentState`."""

    def __init__(self, spec: OdeSpec, t0: float, t1: float, rtol: float = 1e-11, atol: float = 1e-13):
        d = spec.dim
        mu0 = np.full(d, float(spec.mu0))
        var0 = np.full(d, float(spec.sigma0) ** 2)
        c = spec.c_phi
        s0 = np.concatenate([mu0, c * mu0, var0, c * var0, c * c * var0])
        sol = solve_ivp(_moment_rhs, (t0, t1), s0, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise FloatingPointError(f"moment ODE failed: {sol.message}")
        self.spec = spec
        self.t0, self.t1 = t0, t1
        self._sol = sol

    def __call__(self, t: float) -> MomentState:
        s = self._sol.sol(t).reshape(5, -1)
        if not np.isfinite(s).all():
            raise FloatingPointError(f"non-finite moments at t={t}")
        return MomentState(t, *s)

    def gaussian(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        m = self(t)
        return m.mean_x, m.sigma


def evolve_moments(spec: OdeSpec, config: IntegratorConfig) -> MomentTrajectory:
    return MomentTrajectory(spec, config.t_start, config.t_end)


# -- particles and the additive flow -------------------------------------------


@dataclass
class OdeParticle:
    x: np.ndarray
    e: np.ndarray
    t: float


def initial_particles(spec: OdeSpec, n: int, rng: Rng, t_start: float = 0.1) -> OdeParticle:
    x = spec.mu0 + spec.sigma0 * rng.normal((n, spec.dim))
    return OdeParticle(x, spec.c_phi * x, t_start)


def _check(a: np.ndarray) -> np.ndarray:
    if not np.isfinite(a).all():
        raise FloatingPointError("non-finite particle state")
    return a


class RandomFeatureRegressor:
    """``sum_k w_k tanh(a_k v + b_k) + c`` fitted per dimension by least squares."""

    def __init__(self, width: int, rng: Rng):
        self.width = width
        self.rng = rng

    def fit(self, v: np.ndarray, y: np.ndarray) -> "RandomFeatureRegressor":
        self.center = v.mean(axis=0)
        self.scale = v.std(axis=0) + 1e-12
        d = v.shape[1]
        self.a = self.rng.normal((d, self.width)) * 1.5
        self.b = self.rng.uniform(-2.0, 2.0, (d, self.width))
        self.w = np.empty((d, self.width + 1))
        for j in range(d):
            phi = self._features(v[:, j], j)
            self.w[j] = np.linalg.lstsq(phi, y[:, j], rcond=None)[0]
        return self

    def _features(self, vj: np.ndarray, j: int) -> np.ndarray:
        s = (vj - self.center[j]) / self.scale[j]
        return np.concatenate([np.tanh(s[:, None] * self.a[j] + self.b[j]), np.ones((s.size, 1))], axis=1)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return np.stack([self._features(v[:, j], j) @ self.w[j] for j in range(v.shape[1])], axis=1)


@dataclass
class AdditiveFlow:
    """Sequence of additive couplings realizing the leapfrog scheme.

    ``enc[k]`` maps ``x -> increment of e`` and ``dec[k]`` maps ``e -> increment
    of x``.  Forward applies ``enc[0], dec[0], enc[1], dec[1], ...`` and a
    closing ``enc[N]``; every map is volume preserving and exactly invertible.
    """

    enc: list = field(default_factory=list)
    dec: list = field(default_factory=list)
    t_end: float = 0.0

    def forward(self, x, e) -> tuple[np.ndarray, np.ndarray]:
        x, e = np.array(x, dtype=float), np.array(e, dtype=float)
        for k in range(len(self.dec)):
            e = _check(e + self.enc[k](x))
            x = _check(x + self.dec[k](e))
        e = _check(e + self.enc[-1](x))
        return x, e

    def inverse(self, x, e) -> tuple[np.ndarray, np.ndarray]:
        x, e = np.array(x, dtype=float), np.array(e, dtype=float)
        e = e - self.enc[-1](x)
        for k in range(len(self.dec) - 1, -1, -1):
            x = x - self.dec[k](e)
            e = e - self.enc[k](x)
        return x, e


def _kick(t: float, h: float, moments) -> Callable:
    def enc(x):
        mu, sigma = moments(t)
        return h * g_deriv(x, t, mu, sigma)

    return enc


def _drift(t: float, h: float) -> Callable:
    return lambda e: h * f_deriv(e, t)


def build_additive_flow(spec: OdeSpec, config: IntegratorConfig, moments=None, fitted_on: OdeParticle | None = None, rng: Rng | None = None, width: int = 32, n_fit: int = 2000) -> AdditiveFlow:
    """Leapfrog couplings with exact derivatives, or with fitted regressors.

    ``moments`` maps ``t -> (mu_t, sigma_t)``; by default the moment oracle.
    With ``fitted_on`` given, each coupling is replaced by a random-feature
    regressor trained on the particle cloud it will actually see.
    """
    if moments is None:
        moments = evolve_moments(spec, config).gaussian
    eps, t0, N = config.eps, config.t_start, config.N
    flow = AdditiveFlow(t_end=config.t_end)
    exact_enc = [_kick(t0, eps, moments)]
    exact_enc += [_kick(t0 + 2 * n * eps, 2 * eps, moments) for n in range(1, N)]
    exact_enc += [_kick(config.t_end, eps, moments)]
    exact_dec = [_drift(t0 + 2 * n * eps + eps, 2 * eps) for n in range(N)]
    if fitted_on is None:
        flow.enc, flow.dec = exact_enc, exact_dec
        return flow
    rng = rng or Rng(0)
    x = fitted_on.x[:n_fit].copy()
    e = fitted_on.e[:n_fit].copy()

    def fit(fn, v):
        return RandomFeatureRegressor(width, rng).fit(v, fn(v))

    for k in range(N):
        m = fit(exact_enc[k], x)
        flow.enc.append(m)
        e = e + m(x)
        m = fit(exact_dec[k], e)
        flow.dec.append(m)
        x = x + m(e)
    flow.enc.append(fit(exact_enc[N], x))
    return flow


def leapfrog_integrate(spec: OdeSpec, config: IntegratorConfig, particles: OdeParticle, moments=None) -> OdeParticle:
    """Integrate particles from ``t_start`` to ``t_start + T`` with exact derivatives."""
    flow = build_additive_flow(spec, config, moments)
    x, e = flow.forward(particles.x, particles.e)
    return OdeParticle(x, e, config.t_end)


def leapfrog_inverse(spec: OdeSpec, config: IntegratorConfig, particles: OdeParticle, moments=None) -> OdeParticle:
    flow = build_additive_flow(spec, config, moments)
    x, e = flow.inverse(particles.x, particles.e)
    return OdeParticle(x, e, config.t_start)


# -- error recursion ------------------------------------------------------------


def lemma1_recursion(c: float, N: int) -> tuple[np.ndarray, float]:
    """``D_0 = 0``, ``D_{n+1} = C + C * sum_{t<=n} sum_{s<=t} D_s`` with ``C = c / N^2``."""
    if c <= 0 or N < 1:
        raise ValueError("need c > 0 and N >= 1")
    C = c / N**2
    D = np.zeros(N + 1)
    inner = 0.0  # sum_{s<=t} D_s
    outer = 0.0  # sum_{t<=n} inner_t
    with np.errstate(over="raise"):
        try:
            for n in range(N):
                D[n + 1] = C + C * outer
                inner += D[n + 1]
                outer += inner
        except FloatingPointError as exc:
            raise OverflowError(f"recursion overflowed for c={c}, N={N}") from exc
    if not np.isfinite(D).all():
        raise OverflowError(f"recursion overflowed for c={c}, N={N}")
    return D, float(D.max())


def lemma1_roots(c: float, N: int) -> tuple[float, float]:
    """Roots ``a_1 >= a_2`` of ``x^2 - (2 + C) x + 1``."""
    C = c / N**2
    a1 = (2.0 + C + math.sqrt(C * C + 4.0 * C)) / 2.0
    return a1, 1.0 / a1


def lemma1_closed_form(c: float, N: int, n: int) -> float:
    if n < 1:
        raise ValueError("closed form holds for n >= 1")
    C = c / N**2
    a1, _ = lemma1_roots(c, N)
    return C * (1.0 / ((1.0 + a1) * a1 ** (n - 1)) + a1**n / (1.0 + a1))


# -- convergence study ------------------------------------------------------------


def ks_to_standard_normal(x: np.ndarray, rng: Rng) -> float:
    flat = np.asarray(x).reshape(-1)
    ref = rng.normal(flat.size)
    return float(stats.ks_2samp(flat, ref).statistic)


def theorem1_study(spec: OdeSpec, T_grid=(1.0, 2.0, 4.0, 8.0), N: int = 512, sample_size: int = 100_000, seed: int = 0, t_start: float = 0.1, fitted: bool = True) -> list[dict]:
    """Terminal-distribution metrics of the additive flow for each horizon.

    One row per (T, variant): ``exact`` uses the true derivatives, ``fitted``
    replaces each coupling with a regressor trained on its particle cloud.
    """
    rows = []
    for T in T_grid:
        config = IntegratorConfig(float(T), N, t_start)
        rng = Rng(seed)
        p0 = initial_particles(spec, sample_size, rng, t_start)
        variants = [("exact", None)]
        if fitted:
            variants.append(("fitted", p0))
        for name, fit_on in variants:
            flow = build_additive_flow(spec, config, fitted_on=fit_on, rng=Rng(seed + 1))
            x, e = flow.forward(p0.x, p0.e)
            rows.append(
                {
                    "T": float(T),
                    "N": N,
                    "variant": name,
                    "ks_stat": ks_to_standard_normal(x, Rng(seed + 2)),
                    "mean_abs_e": float(np.abs(e).mean()),
                    "terminal_mean": float(x.mean()),
                    "terminal_var": float(x.var()),
                }
            )
    return rows
