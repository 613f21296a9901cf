"""Training and evaluation criteria for augmented flows.

Sign convention: every quantity here is a log-likelihood-like value to be
maximized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI, Rng, Tensor
from .flows import AnfModel, _cat, forward_point, joint_log_density, model_forward


@dataclass(frozen=True)
class ObjectiveConfig:
    anneal_steps: int = 5000
    K: int = 100
    include_entropy: bool = True

    def __post_init__(self):
        if self.anneal_steps < 0 or self.K < 1:
            raise ValueError("need anneal_steps >= 0 and K >= 1")


def gaussian_entropy(d: int) -> float:
    """Entropy of a standard normal in ``d`` dimensions."""
    return 0.5 * d * (1.0 + LOG_2PI)


def _std_normal_np(e: np.ndarray) -> np.ndarray:
    return -0.5 * (e**2).sum(-1) - 0.5 * e.shape[-1] * LOG_2PI


def amle_loss(model: AnfModel, batch_x, rng: Rng, include_entropy: bool = True, e=None) -> Tensor:
    """Batch mean of ``log p(x, e)`` with fresh ``e ~ N(0, I)``, plus ``H(e)``."""
    x = np.asarray(getattr(batch_x, "data", batch_x), dtype=float)
    if x.ndim == 1:
        x = x[:, None] if model.d_x == 1 else x[None, :]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if e is None:
        e = rng.normal((x.shape[0], model.d_e))
    out = ad.mean(joint_log_density(model, x, e))
    if include_entropy:
        out = ad.add(out, gaussian_entropy(model.d_e))
    return out


def beta_schedule(step: int, a: int) -> float:
    """Linear warm-up weight: ``min(step / a, 1)``, constant 1 when ``a == 0``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if a == 0:
        return 1.0
    return min(step / a, 1.0)


def warmup_terms(model: AnfModel, x, e) -> tuple[Tensor, Tensor]:
    """Per-sample ``(data_term, noise_term)`` whose sum is ``log p(x, e)``.

    ``data_term`` is the prior on the transformed data plus the log-scales
    applied to it; ``noise_term`` is the prior on the transformed noise units
    plus the log-scales applied to them.
    """
    pt = forward_point(model, x, e)
    data = ad.add(ad.standard_normal_logpdf(pt.x), pt.logdet_x)
    noise = ad.add(ad.standard_normal_logpdf(_cat(pt.e_units)), pt.logdet_e)
    return data, noise


def warmup_loss(model: AnfModel, x, e, beta: float) -> Tensor:
    """Batch mean of ``data_term + beta * noise_term``; equals the joint at beta=1."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    data, noise = warmup_terms(model, x, e)
    if beta == 1.0:
        return ad.mean(ad.add(data, noise))
    return ad.mean(ad.add(data, ad.mul(noise, beta)))


def _chunked_joint(model: AnfModel, x: np.ndarray, e: np.ndarray) -> np.ndarray:
    rows = x.shape[0]
    chunk = 50_000
    out = np.empty(rows)
    for i in range(0, rows, chunk):
        out[i : i + chunk] = joint_log_density(model, x[i : i + chunk], e[i : i + chunk]).data
    return out


def log_weights(model: AnfModel, x, K: int, rng: Rng, e=None) -> np.ndarray:
    """``log p(x, e_j) - log q(e_j)`` as an ``(n, K)`` array."""
    x = np.atleast_2d(np.asarray(getattr(x, "data", x), dtype=float))
    n = x.shape[0]
    if e is None:
        e = rng.normal((K, n, model.d_e))
    e = np.asarray(e, dtype=float).reshape(K, n, model.d_e)
    xs = np.broadcast_to(x, (K, n, model.d_x)).reshape(K * n, model.d_x)
    es = e.reshape(K * n, model.d_e)
    lw = _chunked_joint(model, xs, es) - _std_normal_np(es)
    return lw.reshape(K, n).T


def log_mean_exp(lw: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(lw, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(lw - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def iw_log_marginal(model: AnfModel, x, K: int, rng: Rng, e=None) -> np.ndarray:
    """Importance-weighted lower bound on ``log p(x)`` per point, ``K`` samples each."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return log_mean_exp(log_weights(model, x, K, rng, e), axis=1)


@dataclass(frozen=True)
class GapEstimate:
    gap: float
    se: float
    iw_bound: float
    single_bound: float

    @property
    def negative(self) -> bool:
        """True when Monte-Carlo noise pushed the estimate below zero."""
        return self.gap < 0.0


def augmentation_gap(model: AnfModel, x, rng: Rng, K_big: int = 1000, n_single: int = 100) -> GapEstimate:
    """Estimate ``log p(x) - (E_e log p(x, e) + H(e))`` averaged over ``x``.

    The first term uses the IW bound with ``K_big`` samples; the second the mean
    of ``n_single`` single-sample bounds.  Reported raw, with a standard error.
    """
    if K_big < 100:
        raise ValueError("K_big must be at least 100")
    lw = log_weights(model, x, K_big, rng)
    iw = log_mean_exp(lw, axis=1)
    single = lw[:, :n_single].mean(axis=1)
    diff = iw - single
    se = float(diff.std(ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else float("nan")
    return GapEstimate(float(diff.mean()), se, float(iw.mean()), float(single.mean()))


# -- Gaussian VAE ------------------------------------------------------------


class GaussianVae:
    """Gaussian encoder ``q(z|x)`` and Gaussian decoder ``p(x|z)``.

    Both networks follow the conditioner protocol: ``forward(inp)`` returns
    ``(log_sigma, mu)``.
    """

    def __init__(self, encoder, decoder):
        self.encoder = encoder
        self.decoder = decoder

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters()


def vae_elbo_gaussian(vae: GaussianVae, x, e, entropy: str = "analytic") -> Tensor:
    """Single-sample reparameterized ELBO per point, ``z = mu(x) + sigma(x) * e``.

    ``entropy="analytic"`` uses the closed-form entropy of ``q(z|x)``;
    ``entropy="sample"`` uses ``-log q(z|x)`` at the drawn ``z``.  Both have
    the same expectation over ``e``.
    """
    if entropy not in ("analytic", "sample"):
        raise ValueError(f"unknown entropy estimator {entropy!r}")
    x, e = ad.as_tensor(x), ad.as_tensor(e)
    log_sig_q, mu_q = vae.encoder.forward(x)
    z = ad.add(mu_q, ad.mul(ad.exp(log_sig_q), e))
    log_sig_p, mu_p = vae.decoder.forward(z)
    fit = ad.add(ad.gaussian_logpdf(x, mu_p, log_sig_p), ad.gaussian_logpdf(z, 0.0, 0.0))
    if entropy == "sample":
        return ad.sub(fit, ad.gaussian_logpdf(z, mu_q, log_sig_q))
    h = ad.add(ad.sum(log_sig_q, axis=-1), gaussian_entropy(e.shape[-1]))
    return ad.add(fit, h)


class _DecoderAsCoupling:
    # y = (x - mu(z)) / sigma(z)  <=>  scale = 1/sigma, shift = -mu/sigma
    def __init__(self, decoder):
        self.decoder = decoder
        self.d_in = decoder.d_in
        self.d_target = decoder.d_target

    def parameters(self):
        return self.decoder.parameters()

    def forward(self, inp):
        log_sig, mu = self.decoder.forward(inp)
        return ad.neg(log_sig), ad.neg(ad.mul(mu, ad.exp(ad.neg(log_sig))))


def vae_as_anf(vae: GaussianVae) -> AnfModel:
    """The one-step affine ANF whose joint density matches the VAE's ELBO."""
    from .flows import AutoencodingStep, ModelSpec

    spec = ModelSpec(d_x=vae.decoder.d_target, unit_dims=(vae.encoder.d_target,), n_steps=1)
    step = AutoencodingStep([vae.encoder], _DecoderAsCoupling(vae.decoder), [])
    return AnfModel(spec, [step])


# -- variational inference ---------------------------------------------------


def vi_augmented_elbo(flow: AnfModel, target_log_density: Callable, rng: Rng, n: int, draws=None) -> Tensor:
    """Monte-Carlo augmented ELBO of ``flow`` against an unnormalized target.

    The flow's data slot carries the auxiliary variable ``u`` and its noise slot
    carries the target-side base variable, so the first coupling moves the
    target coordinates conditioned on ``u`` and the second moves ``u``.
    """
    d_aux, d_t = flow.d_x, flow.d_e
    if draws is None:
        u = rng.normal((n, d_aux))
        e = rng.normal((n, d_t))
    else:
        e, u = draws
    v, z, logdet = model_forward(flow, u, e)
    log_q = _std_normal_np(np.asarray(e)) + _std_normal_np(np.asarray(u))
    vals = ad.add(
        ad.add(target_log_density(z), ad.standard_normal_logpdf(v)),
        ad.sub(logdet, log_q),
    )
    return ad.mean(vals)


def vi_sample(flow: AnfModel, rng: Rng, n: int) -> np.ndarray:
    u = rng.normal((n, flow.d_x))
    e = rng.normal((n, flow.d_e))
    _, z, _ = model_forward(flow, u, e)
    return z.data


def auxiliary_variable_elbo(step, target_log_density: Callable, e, u) -> Tensor:
    """Hierarchical-VI form ``log p(z) + log r(u|z) - log q(z|u) - log q(u)``.

    ``step`` supplies the two conditioners: ``q(z|u) = N(m_a(u), s_a(u)^2)``
    and ``r(u|z) = N(-m_b(z)/s_b(z), s_b(z)^-2)``.
    """
    e, u = ad.as_tensor(e), ad.as_tensor(u)
    log_sa, m_a = step.enc[0].forward(u)
    z = ad.add(ad.mul(ad.exp(log_sa), e), m_a)
    log_q_z = ad.gaussian_logpdf(z, m_a, log_sa)
    log_sb, m_b = step.dec.forward(z)
    log_r_u = ad.gaussian_logpdf(u, ad.neg(ad.mul(m_b, ad.exp(ad.neg(log_sb)))), ad.neg(log_sb))
    log_q_u = ad.gaussian_logpdf(u, 0.0, 0.0)
    return ad.sub(ad.add(target_log_density(z), log_r_u), ad.add(log_q_z, log_q_u))


def gaussian_vi_elbo(mu: Tensor, log_sigma: Tensor, target_log_density: Callable, rng: Rng, n: int, e=None) -> Tensor:
    """Reparameterized ELBO of a diagonal Gaussian ``q``; entropy in closed form."""
    if e is None:
        e = rng.normal((n, mu.shape[-1]))
    z = ad.add(mu, ad.mul(ad.exp(log_sigma), e))
    entropy = ad.add(ad.sum(log_sigma), gaussian_entropy(mu.shape[-1]))
    return ad.add(ad.mean(target_log_density(z)), entropy)
