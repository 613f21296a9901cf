"""Learnable scale/shift functions for couplings, plus activation normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tensor

ACTIVATIONS = {
    "swish": ad.swish,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
}


@dataclass(frozen=True)
class ScaleHeadConfig:
    """Bounds and initial value of the affine scale head.

    ``total_steps`` is how many scale applications get composed on the
    transformed unit; at initialization their product equals
    ``target_composed_scale``.
    """

    total_steps: int = 1
    clip_bound: float = 2.5
    target_composed_scale: float = 0.95

    @property
    def offset(self) -> float:
        # log_sigmoid(0) = -log 2, so the per-step scale at a zero head is
        # exp(offset - log 2) = target ** (1 / total_steps).
        return math.log(2.0) + math.log(self.target_composed_scale) / self.total_steps


class MlpConditioner:
    """MLP mapping a conditioning input to a (log-scale, shift) pair.

    In ``affine`` mode the last layer emits ``2 * d_target`` values: the first
    half is the shift, the second the pre-scale.  The log-scale is
    ``clamp(log_sigmoid(pre) + offset, -clip, clip)``.  In ``additive`` mode
    only the shift is produced and the scale is exactly one.
    """

    def __init__(
        self,
        d_in: int,
        d_target: int,
        hidden=(64, 64),
        activation: str = "swish",
        head_mode: str = "affine",
        scale_head: ScaleHeadConfig | None = None,
        rng: Rng | None = None,
        init_std: float = 0.1,
    ):
        if head_mode not in ("affine", "additive"):
            raise ValueError(f"unknown head mode {head_mode!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or Rng(0)
        self.d_in = d_in
        self.d_target = d_target
        self.head_mode = head_mode
        self.activation = activation
        self.scale_head = scale_head or ScaleHeadConfig()
        self.layer_widths = [d_in, *hidden]
        out = 2 * d_target if head_mode == "affine" else d_target
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for a, b in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            self.weights.append(Tensor(rng.truncated_normal((a, b), init_std), requires_grad=True))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True))
        # zero head: identity-like coupling at initialization
        self.weights.append(Tensor(np.zeros((self.layer_widths[-1], out)), requires_grad=True))
        self.biases.append(Tensor(np.zeros(out), requires_grad=True))

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def raw(self, inp: Tensor) -> Tensor:
        inp = ad.as_tensor(inp)
        if inp.shape[-1] != self.d_in:
            raise ValueError(f"conditioner expects width {self.d_in}, got {inp.shape[-1]}")
        act = ACTIVATIONS[self.activation]
        h = inp
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(ad.add(ad.matmul(h, w), b))
        return ad.add(ad.matmul(h, self.weights[-1]), self.biases[-1])

    def forward(self, inp: Tensor) -> tuple[Tensor | None, Tensor]:
        """Return ``(log_scale, shift)``; ``log_scale`` is None in additive mode."""
        raw = self.raw(inp)
        if self.head_mode == "additive":
            return None, raw
        shift, pre = ad.split(raw, [self.d_target, self.d_target], axis=-1)
        bound = self.scale_head.clip_bound
        log_scale = ad.clamp(ad.add(ad.log_sigmoid(pre), self.scale_head.offset), -bound, bound)
        return log_scale, shift


class ConstantConditioner:
    """Input-independent (log-scale, shift); handy for identity couplings."""

    def __init__(self, d_in: int, log_scale, shift):
        self.d_in = d_in
        self.log_scale = None if log_scale is None else np.asarray(log_scale, dtype=float)
        self.shift = np.asarray(shift, dtype=float)
        self.d_target = self.shift.size

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, inp):
        inp = ad.as_tensor(inp)
        if inp.shape[-1] != self.d_in:
            raise ValueError(f"conditioner expects width {self.d_in}, got {inp.shape[-1]}")
        n = inp.shape[0]
        shift = Tensor(np.broadcast_to(self.shift, (n, self.d_target)))
        if self.log_scale is None:
            return None, shift
        return Tensor(np.broadcast_to(self.log_scale, (n, self.d_target))), shift


def cond_forward(c, inp) -> tuple[Tensor, Tensor]:
    """Strictly positive scale and unconstrained shift of a conditioner."""
    log_scale, shift = c.forward(inp)
    if log_scale is None:
        return Tensor(np.ones(shift.shape)), shift
    return ad.exp(log_scale), shift


class ActNorm:
    """Per-dimension affine map ``y = scale * x + shift`` with data-dependent init."""

    def __init__(self, dim: int):
        self.dim = dim
        self.log_scale = Tensor(np.zeros(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.initialized = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def parameters(self) -> list[Tensor]:
        return [self.log_scale, self.shift]

    def initialize(self, batch) -> None:
        data = np.asarray(getattr(batch, "data", batch), dtype=float)
        mu = data.mean(axis=0)
        sd = data.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        self.log_scale.data[...] = -np.log(sd)
        self.shift.data[...] = -mu / sd
        self.initialized = True

    def apply(self, x) -> tuple[Tensor, Tensor]:
        """Return the transformed batch and the per-sample log-det."""
        if not self.initialized:
            raise RuntimeError("ActNorm applied before data-dependent initialization")
        x = ad.as_tensor(x)
        y = ad.add(ad.mul(x, ad.exp(self.log_scale)), self.shift)
        logdet = ad.mul(ad.sum(self.log_scale), np.ones(x.shape[0]))
        return y, logdet

    def inverse(self, y) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise RuntimeError("ActNorm applied before data-dependent initialization")
        y = ad.as_tensor(y)
        x = ad.mul(ad.sub(y, self.shift), ad.exp(ad.neg(self.log_scale)))
        logdet = ad.mul(ad.sum(self.log_scale), -np.ones(y.shape[0]))
        return x, logdet


def actnorm_init(layer: ActNorm, batch):
    layer.initialize(batch)
    return layer.apply(batch)


def actnorm_apply(layer: ActNorm, batch):
    return layer.apply(batch)
