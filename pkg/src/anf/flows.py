"""Augmented normalizing flows: encoding/decoding couplings and their composition.

The model acts on ``(x, e_1, ..., e_L)``.  One autoencoding step first encodes
each noise unit ``e_l`` conditioned on ``x`` and the already-encoded units
``z_{<l}``, then decodes ``x`` conditioned on all ``z`` and each lower unit
``z_l`` conditioned on the (pre-decoding) units above it.  With a single unit
this is the plain enc/dec pair.

Batches are ``(n, d)`` arrays or tensors; log-dets are per-sample ``(n,)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor
from .conditioners import ActNorm, MlpConditioner, ScaleHeadConfig


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild an :class:`AnfModel` besides its weights."""

    d_x: int
    unit_dims: tuple[int, ...] = (1,)
    n_steps: int = 5
    mode: str = "affine"
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "swish"
    tie_parameters: bool = False
    actnorm: bool = False
    clip_bound: float = 2.5
    target_scale: float = 0.95

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unit_dims"] = list(self.unit_dims)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["unit_dims"] = tuple(d["unit_dims"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class AutoencodingStep:
    """One encoding pass over all units followed by one decoding pass.

    ``enc[l]`` transforms unit ``l`` from ``concat(x, z_<l)``; ``dec`` transforms
    ``x`` from ``concat(z_1..z_L)``; ``dec_units[l]`` transforms unit ``l`` from
    ``concat(z_>l)`` (the top unit is left as is).
    """

    enc: list
    dec: object
    dec_units: list = field(default_factory=list)
    norms_enc: list | None = None
    norms_dec: list | None = None

    def conditioners(self) -> list:
        return [*self.enc, self.dec, *self.dec_units]


@dataclass
class JointPoint:
    """Augmented sample in transit plus the log-det accumulated so far.

    The log-det is kept in two parts: contributions acting on the data block
    and contributions acting on the noise units.
    """

    x: Tensor
    e_units: list
    logdet_x: Tensor
    logdet_e: Tensor

    @property
    def logdet_accum(self) -> Tensor:
        return ad.add(self.logdet_x, self.logdet_e)


class AnfModel:
    """Ordered stack of autoencoding steps with a standard normal prior."""

    def __init__(self, spec: ModelSpec, steps: list[AutoencodingStep]):
        self.spec = spec
        self.steps = steps

    @property
    def d_x(self) -> int:
        return self.spec.d_x

    @property
    def unit_dims(self) -> tuple[int, ...]:
        return tuple(self.spec.unit_dims)

    @property
    def d_e(self) -> int:
        return int(sum(self.spec.unit_dims))

    @property
    def n_units(self) -> int:
        return len(self.spec.unit_dims)

    def parameters(self) -> list[Tensor]:
        seen: set[int] = set()
        out = []
        for step in self.steps:
            layers = list(step.conditioners())
            layers += list(step.norms_enc or []) + list(step.norms_dec or [])
            for layer in layers:
                for p in layer.parameters():
                    if id(p) not in seen:
                        seen.add(id(p))
                        out.append(p)
        return out

    def actnorm_layers(self) -> list[ActNorm]:
        out = []
        for step in self.steps:
            out += list(step.norms_enc or []) + list(step.norms_dec or [])
        return out


def build_model(spec: ModelSpec, rng: Rng | None = None) -> AnfModel:
    """Instantiate freshly initialized conditioners for ``spec``."""
    rng = rng or Rng(0)
    if spec.n_steps < 1 or not spec.unit_dims or min(spec.unit_dims) < 1:
        raise ValueError("need at least one step and positive unit dimensions")
    dims = list(spec.unit_dims)
    L = len(dims)
    n = spec.n_steps
    # scale applications composed on each block over the whole model
    count_x = n
    count_units = [2 * n if l < L - 1 else n for l in range(L)]

    def make(d_in, d_t, count):
        head = ScaleHeadConfig(count, spec.clip_bound, spec.target_scale)
        return MlpConditioner(d_in, d_t, spec.hidden, spec.activation, spec.mode, head, rng)

    def make_step():
        enc = [make(spec.d_x + sum(dims[:l]), dims[l], count_units[l]) for l in range(L)]
        dec = make(sum(dims), spec.d_x, count_x)
        dec_units = [make(sum(dims[l + 1 :]), dims[l], count_units[l]) for l in range(L - 1)]
        return enc, dec, dec_units

    steps = []
    shared = make_step() if spec.tie_parameters else None
    for _ in range(n):
        enc, dec, dec_units = shared if shared is not None else make_step()
        norms_enc = norms_dec = None
        if spec.actnorm:
            norms_enc = [ActNorm(d) for d in dims]
            norms_dec = [ActNorm(spec.d_x)] + [ActNorm(d) for d in dims[:-1]]
        steps.append(AutoencodingStep(list(enc), dec, list(dec_units), norms_enc, norms_dec))
    return AnfModel(spec, steps)


# -- single couplings ---------------------------------------------------------


def _batch(a) -> Tensor:
    t = ad.as_tensor(a)
    return ad.reshape(t, (1, t.shape[0])) if t.ndim == 1 else t


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n))


def _affine(cond, context: Tensor, target: Tensor) -> tuple[Tensor, Tensor | None]:
    log_scale, shift = cond.forward(context)
    if log_scale is None:
        return ad.add(target, shift), None
    return ad.add(ad.mul(target, ad.exp(log_scale)), shift), ad.sum(log_scale, axis=-1)


def _affine_inverse(cond, context: Tensor, out: Tensor) -> tuple[Tensor, Tensor | None]:
    log_scale, shift = cond.forward(context)
    if log_scale is None:
        return ad.sub(out, shift), None
    x = ad.mul(ad.sub(out, shift), ad.exp(ad.neg(log_scale)))
    return x, ad.neg(ad.sum(log_scale, axis=-1))


def _acc(total: Tensor, term: Tensor | None) -> Tensor:
    return total if term is None else ad.add(total, term)


def _cat(parts: list) -> Tensor:
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def _check_dims(model: AnfModel, x: Tensor, units: list) -> None:
    if x.shape[-1] != model.d_x:
        raise ValueError(f"x has width {x.shape[-1]}, model expects {model.d_x}")
    if [u.shape[-1] for u in units] != list(model.unit_dims):
        raise ValueError(f"unit widths {[u.shape[-1] for u in units]} != {list(model.unit_dims)}")


def enc_forward(step: AutoencodingStep, x, e) -> tuple[Tensor, Tensor]:
    """Encoding coupling on a single-unit step: ``e' = s(x) * e + m(x)``."""
    x, e = _batch(x), _batch(e)
    e2, ld = _affine(step.enc[0], x, e)
    return e2, _acc(_zeros(x.shape[0]), ld)


def dec_forward(step: AutoencodingStep, x, e) -> tuple[Tensor, Tensor]:
    """Decoding coupling on a single-unit step: ``x' = s(e) * x + m(e)``."""
    x, e = _batch(x), _batch(e)
    x2, ld = _affine(step.dec, e, x)
    return x2, _acc(_zeros(x.shape[0]), ld)


def enc_inverse(step: AutoencodingStep, x, e2) -> tuple[Tensor, Tensor]:
    x, e2 = _batch(x), _batch(e2)
    e, ld = _affine_inverse(step.enc[0], x, e2)
    return e, _acc(_zeros(x.shape[0]), ld)


def dec_inverse(step: AutoencodingStep, x2, e) -> tuple[Tensor, Tensor]:
    x2, e = _batch(x2), _batch(e)
    x, ld = _affine_inverse(step.dec, e, x2)
    return x, _acc(_zeros(x2.shape[0]), ld)


# -- whole model --------------------------------------------------------------


def _norm(layer: ActNorm, t: Tensor, data_init: bool) -> tuple[Tensor, Tensor]:
    if data_init and not layer.initialized:
        layer.initialize(t)
    return layer.apply(t)


def step_forward(step: AutoencodingStep, pt: JointPoint, data_init: bool = False) -> JointPoint:
    x, units = pt.x, list(pt.e_units)
    ld_x, ld_e = pt.logdet_x, pt.logdet_e
    L = len(units)
    zs = []
    for l in range(L):
        z, ld = _affine(step.enc[l], _cat([x] + zs), units[l])
        ld_e = _acc(ld_e, ld)
        zs.append(z)
    if step.norms_enc:
        for l in range(L):
            zs[l], ld = _norm(step.norms_enc[l], zs[l], data_init)
            ld_e = ad.add(ld_e, ld)
    x, ld = _affine(step.dec, _cat(zs), x)
    ld_x = _acc(ld_x, ld)
    decoded = list(zs)
    for l in range(L - 1):
        decoded[l], ld = _affine(step.dec_units[l], _cat(zs[l + 1 :]), zs[l])
        ld_e = _acc(ld_e, ld)
    if step.norms_dec:
        x, ld = _norm(step.norms_dec[0], x, data_init)
        ld_x = ad.add(ld_x, ld)
        for l in range(L - 1):
            decoded[l], ld = _norm(step.norms_dec[l + 1], decoded[l], data_init)
            ld_e = ad.add(ld_e, ld)
    return JointPoint(x, decoded, ld_x, ld_e)


def step_inverse(step: AutoencodingStep, pt: JointPoint) -> JointPoint:
    y, decoded = pt.x, list(pt.e_units)
    ld_x, ld_e = pt.logdet_x, pt.logdet_e
    L = len(decoded)
    if step.norms_dec:
        y, ld = step.norms_dec[0].inverse(y)
        ld_x = ad.add(ld_x, ld)
        for l in range(L - 1):
            decoded[l], ld = step.norms_dec[l + 1].inverse(decoded[l])
            ld_e = ad.add(ld_e, ld)
    zs = list(decoded)
    for l in range(L - 2, -1, -1):
        zs[l], ld = _affine_inverse(step.dec_units[l], _cat(zs[l + 1 :]), decoded[l])
        ld_e = _acc(ld_e, ld)
    x, ld = _affine_inverse(step.dec, _cat(zs), y)
    ld_x = _acc(ld_x, ld)
    if step.norms_enc:
        for l in range(L):
            zs[l], ld = step.norms_enc[l].inverse(zs[l])
            ld_e = ad.add(ld_e, ld)
    units = [None] * L
    for l in range(L - 1, -1, -1):
        units[l], ld = _affine_inverse(step.enc[l], _cat([x] + zs[:l]), zs[l])
        ld_e = _acc(ld_e, ld)
    return JointPoint(x, units, ld_x, ld_e)


def _as_units(model: AnfModel, e) -> list:
    if isinstance(e, (list, tuple)):
        return [_batch(u) for u in e]
    e = _batch(e)
    if model.n_units == 1:
        return [e]
    return ad.split(e, list(model.unit_dims), axis=-1)


def forward_point(model: AnfModel, x, e, data_init: bool = False) -> JointPoint:
    """Run all steps and return the final :class:`JointPoint` (logdets split)."""
    x = _batch(x)
    units = _as_units(model, e)
    _check_dims(model, x, units)
    n = x.shape[0]
    pt = JointPoint(x, units, _zeros(n), _zeros(n))
    for step in model.steps:
        pt = step_forward(step, pt, data_init)
    return pt


def model_forward(model: AnfModel, x, e) -> tuple[Tensor, Tensor, Tensor]:
    """``(x, e) -> (y, z, logdet)`` for a single-unit model.

    For hierarchical models ``z`` is the concatenation of all unit latents;
    use :func:`hierarchical_forward` to keep them apart.
    """
    pt = forward_point(model, x, e)
    return pt.x, _cat(pt.e_units), pt.logdet_accum


def model_inverse(model: AnfModel, y, z) -> tuple[Tensor, Tensor, Tensor]:
    """Exact inverse of :func:`model_forward`; the log-det is of the inverse map."""
    x, units, ld = hierarchical_inverse(model, y, _as_units(model, z))
    return x, _cat(units), ld


def hierarchical_forward(model: AnfModel, x, e_units) -> tuple[Tensor, list, Tensor]:
    pt = forward_point(model, x, list(e_units))
    return pt.x, pt.e_units, pt.logdet_accum


def hierarchical_inverse(model: AnfModel, y, z_units) -> tuple[Tensor, list, Tensor]:
    y = _batch(y)
    units = [_batch(u) for u in z_units]
    _check_dims(model, y, units)
    n = y.shape[0]
    pt = JointPoint(y, units, _zeros(n), _zeros(n))
    for step in reversed(model.steps):
        pt = step_inverse(step, pt)
    return pt.x, pt.e_units, pt.logdet_accum


def initialize_actnorm(model: AnfModel, x, e) -> None:
    """Data-dependent initialization of every ActNorm layer, in forward order."""
    forward_point(model, x, e, data_init=True)


def joint_log_density(model: AnfModel, x, e) -> Tensor:
    """``log N(G(x, e); 0, I) + log|det dG/d(x, e)|`` per sample."""
    pt = forward_point(model, x, e)
    return ad.add(ad.standard_normal_logpdf(_cat([pt.x, *pt.e_units])), pt.logdet_accum)


def sample(model: AnfModel, n: int, rng: Rng) -> np.ndarray:
    """Draw ``n`` points from the model's marginal over ``x``."""
    y = rng.normal((n, model.d_x))
    zs = [rng.normal((n, d)) for d in model.unit_dims]
    x, _, _ = hierarchical_inverse(model, y, zs)
    return x.data


def lossy_reconstruct(model: AnfModel, x, rng: Rng, randomize: bool = True) -> np.ndarray:
    """Re-draw every latent except the topmost unit's and invert.

    With ``randomize=False`` all latents are kept, which reproduces ``x``.
    """
    if model.n_units < 2:
        raise ValueError("lossy reconstruction needs a hierarchical model (L >= 2)")
    x = _batch(x)
    n = x.shape[0]
    e_units = [rng.normal((n, d)) for d in model.unit_dims]
    y, zs, _ = hierarchical_forward(model, x, e_units)
    if randomize:
        y = Tensor(rng.normal(y.shape))
        zs = [Tensor(rng.normal(z.shape)) for z in zs[:-1]] + [zs[-1]]
    x2, _, _ = hierarchical_inverse(model, y, zs)
    return x2.data


def linear_interpolate(u, v, t: float) -> np.ndarray:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    return t * u + (1.0 - t) * v


def rescaled_interpolate(u, v, t: float) -> np.ndarray:
    """Linear interpolant rescaled so its norm is the interpolated norm."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if t == 1.0:
        return u.copy()
    if t == 0.0:
        return v.copy()
    h = linear_interpolate(u, v, t)
    norm = np.linalg.norm(h)
    if norm == 0.0:
        raise ValueError("linear interpolant has zero norm; rescaling is undefined")
    target = t * np.linalg.norm(u) + (1.0 - t) * np.linalg.norm(v)
    return h * (target / norm)
