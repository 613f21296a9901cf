import numpy as np
import pytest

from anf.autodiff import Rng
from anf.conditioners import ConstantConditioner
from anf.flows import AnfModel, AutoencodingStep, ModelSpec, build_model


def central_diff(f, arr, index, h=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``arr[index]`` (mutated in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def identity_model(d_x=1, d_e=1, n_steps=1):
    spec = ModelSpec(d_x=d_x, unit_dims=(d_e,), n_steps=n_steps)
    steps = [
        AutoencodingStep([ConstantConditioner(d_x, np.zeros(d_e), np.zeros(d_e))], ConstantConditioner(d_e, np.zeros(d_x), np.zeros(d_x)))
        for _ in range(n_steps)
    ]
    return AnfModel(spec, steps)


def randomize(model, rng, scale=0.3):
    """Perturb every parameter so couplings are far from the identity."""
    for p in model.parameters():
        p.data += scale * rng.normal(p.shape)
    return model


def random_model(rng, d_x=2, unit_dims=(2,), n_steps=2, mode="affine", tie=False, hidden=(8,), actnorm=False):
    spec = ModelSpec(d_x=d_x, unit_dims=tuple(unit_dims), n_steps=n_steps, mode=mode, hidden=hidden, tie_parameters=tie, actnorm=actnorm)
    return randomize(build_model(spec, rng), rng)


@pytest.fixture
def rng():
    return Rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
