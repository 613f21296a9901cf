"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation executed while a :class:`Tape` is active is appended to it.
``backward`` walks the tape once in reverse and returns exact gradients for
the requested leaves.  Outside a tape, operations are plain numpy arithmetic.

Shapes follow numpy semantics; gradients of broadcast operands are summed back
to the operand shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

_CHECK_FINITE = True
_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_check_finite(enabled: bool) -> bool:
    """Toggle the NaN/Inf post-condition on every op; returns the old value."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return old


class _Node:
    __slots__ = ("tape", "inputs", "vjp", "name")

    def __init__(self, tape, inputs, vjp, name):
        self.tape = tape
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tensor:
    """A float64 array, optionally a trainable leaf or a recorded op output."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: neg(a)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; ops executed inside are recorded in evaluation
    order.  A tape is single-owner: do not record into it from several threads.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        return backward(self, root, wrt)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, inputs: tuple, vjp: Callable, name: str) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{name} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._node = None
    tape = _active_tape()
    if tape is not None:
        out._node = _Node(tape, inputs, vjp, name)
        tape.nodes.append(out)
    return out


def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    Tensors that do not reach the root receive zeros of their own shape.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root._node is None or root._node.tape is not tape:
        if not any(root is w for w in wrt):
            raise ValueError("root was not recorded on this tape")
        return [np.ones_like(w.data) if w is root else np.zeros_like(w.data) for w in wrt]
    grads[id(root)] = np.ones_like(root.data)
    stop = len(tape.nodes)
    for i in range(stop - 1, -1, -1):
        out = tape.nodes[i]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not isinstance(inp, Tensor):
                continue
            gi = _unbroadcast(gi, inp.data.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


# -- primitives ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    return _make(out, (a,), lambda g: (g * _sigmoid(-ad),), "log_sigmoid")


def swish(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return _make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "swish")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.data.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into consecutive blocks of the given sizes."""
    a = as_tensor(a)
    if int(np.sum(sizes)) != a.data.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover extent {a.data.shape[axis]}")
    shape = a.data.shape
    ax = axis % a.ndim
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def vjp(g, idx=idx):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        out.append(_make(a.data[idx].copy(), (a,), vjp, "split"))
        start += n
    return out


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _make(out, (a,), vjp, "logsumexp")


def gaussian_logpdf(x, mu=0.0, log_sigma=0.0) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis.

    A 1-D input gives a scalar; an ``(n, d)`` batch gives ``n`` values.
    """
    x, mu, log_sigma = as_tensor(x), as_tensor(mu), as_tensor(log_sigma)
    z = div(sub(x, mu), exp(log_sigma))
    per_dim = sub(mul(square(z), -0.5), add(log_sigma, 0.5 * LOG_2PI))
    d = x.shape[-1]
    if per_dim.shape[-1] != d:
        per_dim = add(per_dim, np.zeros(x.shape))
    return sum(per_dim, axis=-1)


def standard_normal_logpdf(x) -> Tensor:
    """``gaussian_logpdf(x, 0, 0)`` with fewer recorded ops."""
    x = as_tensor(x)
    d = x.shape[-1]
    return sub(mul(sum(square(x), axis=-1), -0.5), 0.5 * d * LOG_2PI)


# -- randomness ---------------------------------------------------------------


class Rng:
    """Seeded stream of random numbers (PCG64).

    Identical seeds give identical sequences.  ``state``/``set_state`` allow
    checkpointing a stream mid-run.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def randn(self, *shape: int) -> Tensor:
        return Tensor(self._gen.standard_normal(shape))

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def choice(self, n: int, size, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal draws with std ``std`` resampled until within ``bound`` stds."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams derived deterministically from this one."""
        seeds = self._gen.integers(0, 2**63 - 1, size=n)
        return [Rng(int(s)) for s in seeds]

    def state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


def numerical_gradient(f: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-5):
    """Central finite differences of scalar ``f`` w.r.t. arrays mutated in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
