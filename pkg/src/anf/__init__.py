"""Augmented normalizing flows on numpy: autodiff, couplings, objectives, and an ODE laboratory."""

from . import autodiff, conditioners, flows, hamiltonian, objectives, toydata, trainer
from .flows import AnfModel, ModelSpec, build_model

__all__ = [
    "AnfModel",
    "ModelSpec",
    "autodiff",
    "build_model",
    "conditioners",
    "flows",
    "hamiltonian",
    "objectives",
    "toydata",
    "trainer",
]
