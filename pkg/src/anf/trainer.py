"""Adam with decoupled weight decay, the warm-up training loop, and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Rng, Tensor
from .flows import AnfModel, ModelSpec, build_model
from .objectives import amle_loss, beta_schedule, log_mean_exp, log_weights, warmup_loss

logger = logging.getLogger(__name__)

MAGIC = b"ANF1"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite objective at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class SpecMismatch(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    updates: int = 20_000
    weight_decay: float = 0.0
    anneal_steps: int = 5_000
    K: int = 100
    seed: int = 0
    log_every: int = 1_000
    n_eval: int = 256
    objective: str = "warmup"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.updates < 0 or self.weight_decay < 0:
            raise ValueError("invalid training configuration")
        if self.objective not in ("warmup", "amle"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Sequence) -> "AdamState":
        return cls([np.zeros_like(_arr(p)) for p in params], [np.zeros_like(_arr(p)) for p in params])


def _arr(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adam_step(state: AdamState, params: Sequence, grads: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0) -> None:
    """One in-place Adam descent step; decay ``p -= lr * wd * p`` is applied separately."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p = _arr(p)
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- training -----------------------------------------------------------------


@dataclass
class Dataset:
    train: np.ndarray
    heldout: np.ndarray


def make_dataset_splits(mixture, n_train: int, n_heldout: int, rng: Rng) -> Dataset:
    return Dataset(mixture.sample(n_train, rng), mixture.sample(n_heldout, rng))


@dataclass
class TrainState:
    step: int
    adam: AdamState
    rng: Rng
    metrics: list = field(default_factory=list)


def fresh_state(model: AnfModel, config: TrainConfig) -> TrainState:
    return TrainState(0, AdamState.zeros(model.parameters()), Rng(config.seed))


def evaluate_bound(model: AnfModel, x: np.ndarray, K: int, rng: Rng) -> tuple[float, float, float]:
    """Mean IW bound, its standard error, and the mean augmentation-gap estimate."""
    lw = log_weights(model, x, K, rng)
    iw = log_mean_exp(lw, axis=1)
    gap = iw - lw.mean(axis=1)
    return float(iw.mean()), float(iw.std(ddof=1) / math.sqrt(iw.size)), float(gap.mean())


def _eval_rng(config: TrainConfig, step: int) -> Rng:
    return Rng(config.seed * 1_000_003 + step + 17)


def train(model: AnfModel, data: Dataset, config: TrainConfig, state: TrainState | None = None) -> tuple[AnfModel, list[dict]]:
    """Maximize the warm-up objective (or plain AMLE) with Adam.

    Runs from ``state.step`` up to ``config.updates`` and returns the model and
    the metrics rows ``{step, beta, objective, iw_bound, gap}``.
    """
    state = state or fresh_state(model, config)
    params = model.parameters()
    heldout = data.heldout[: config.n_eval]
    n = data.train.shape[0]
    if state.step == 0 and model.actnorm_layers():
        from .flows import initialize_actnorm

        idx = state.rng.integers(0, n, config.batch_size)
        initialize_actnorm(model, data.train[idx], state.rng.normal((config.batch_size, model.d_e)))
    window = []
    while state.step < config.updates:
        step = state.step
        beta = beta_schedule(step, config.anneal_steps)
        idx = state.rng.integers(0, n, config.batch_size)
        x = data.train[idx]
        e = state.rng.normal((config.batch_size, model.d_e))
        try:
            with ad.Tape() as tape:
                if config.objective == "warmup":
                    obj = warmup_loss(model, x, e, beta)
                else:
                    obj = amle_loss(model, x, state.rng, include_entropy=False, e=e)
                loss = ad.neg(obj)
            grads = ad.backward(tape, loss, params)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        if not all(np.isfinite(g).all() for g in grads):
            raise TrainingDiverged(step, "non-finite gradient")
        adam_step(state.adam, params, grads, config.lr, config.weight_decay)
        state.step += 1
        window.append(obj.item())
        if state.step % config.log_every == 0 or state.step == config.updates:
            iw, _, gap = evaluate_bound(model, heldout, config.K, _eval_rng(config, state.step))
            row = {
                "step": state.step,
                "beta": beta_schedule(state.step, config.anneal_steps),
                "objective": float(np.mean(window)),
                "iw_bound": iw,
                "gap": gap,
            }
            window = []
            state.metrics.append(row)
            logger.info("step %d beta %.3f obj %.4f iw %.4f gap %.4f", *row.values())
    return model, state.metrics


def optimize(params: list[Tensor], objective_fn, n_steps: int, lr: float, rng: Rng, weight_decay: float = 0.0) -> list[float]:
    """Generic Adam ascent on ``objective_fn(rng) -> scalar Tensor``."""
    adam = AdamState.zeros(params)
    trace = []
    for step in range(n_steps):
        with ad.Tape() as tape:
            obj = objective_fn(rng)
            loss = ad.neg(obj)
        grads = ad.backward(tape, loss, params)
        adam_step(adam, params, grads, lr, weight_decay)
        trace.append(obj.item())
    return trace


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path, model: AnfModel, state: TrainState | None = None, config: TrainConfig | dict | None = None) -> None:
    """Write an ``ANF1`` checkpoint.

    Layout: a text line ``ANF1 <version> <spec-hash> <n-params> <n-opt>``, one
    line of sorted-key JSON metadata, then little-endian float64 payload:
    parameters in ``model.parameters()`` order followed by Adam ``m`` and ``v``.
    """
    params = model.parameters()
    payload = [p.data.reshape(-1) for p in params]
    n_params = int(sum(p.size for p in payload))
    n_opt = 0
    meta = {
        "model_spec": model.spec.to_dict(),
        "actnorm_initialized": [layer.initialized for layer in model.actnorm_layers()],
        "step": 0,
        "config": config.to_dict() if isinstance(config, TrainConfig) else (config or {}),
    }
    if state is not None:
        payload += [m.reshape(-1) for m in state.adam.m] + [v.reshape(-1) for v in state.adam.v]
        n_opt = 2 * n_params
        meta["step"] = state.step
        meta["adam_t"] = state.adam.t
        meta["rng"] = state.rng.state()
        meta["metrics"] = state.metrics
    header = f"{MAGIC.decode()} {FORMAT_VERSION} {model.spec.digest()} {n_params} {n_opt}\n"
    body = np.concatenate(payload) if payload else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(body.astype("<f8").tobytes())


def load_checkpoint(path, expected_spec: ModelSpec | None = None):
    """Read a checkpoint; returns ``(model, state_or_None, config_dict)``."""
    raw = Path(path).read_bytes()
    try:
        first, rest = raw.split(b"\n", 1)
        meta_line, blob = rest.split(b"\n", 1)
        magic, version, digest, n_params, n_opt = first.decode().split(" ")
        n_params, n_opt = int(n_params), int(n_opt)
        meta = json.loads(meta_line)
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header") from exc
    if magic != MAGIC.decode():
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if int(version) != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    spec = ModelSpec.from_dict(meta["model_spec"])
    if spec.digest() != digest:
        raise CorruptCheckpoint(f"{path}: spec hash does not match its metadata")
    if expected_spec is not None and expected_spec.digest() != digest:
        raise SpecMismatch(f"{path}: checkpoint spec {digest} != expected {expected_spec.digest()}")
    if len(blob) != 8 * (n_params + n_opt):
        raise CorruptCheckpoint(f"{path}: payload has {len(blob)} bytes, expected {8 * (n_params + n_opt)}")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    model = build_model(spec, Rng(0))
    params = model.parameters()
    if sum(p.size for p in params) != n_params:
        raise CorruptCheckpoint(f"{path}: parameter count does not match the model spec")
    offset = 0
    for p in params:
        p.data[...] = values[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    for layer, flag in zip(model.actnorm_layers(), meta.get("actnorm_initialized", [])):
        layer.initialized = bool(flag)
    state = None
    if n_opt:
        m, v = [], []
        for target in (m, v):
            for p in params:
                target.append(values[offset : offset + p.size].reshape(p.shape).copy())
                offset += p.size
        rng = Rng(0)
        rng.set_state(meta["rng"])
        state = TrainState(meta["step"], AdamState(m, v, meta["adam_t"]), rng, list(meta.get("metrics", [])))
    return model, state, meta.get("config", {})
