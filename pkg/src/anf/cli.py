"""Command-line runner for every experiment in the package.

Usage::

    anf <command> [--config PATH] [--out DIR] [--seed INT] [--set key=value ...]

Commands: train, eval, sample, interpolate, recon, ode, lemma1, gap.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Lists are comma separated.  Every key is listed in :data:`SCHEMA`; unknown keys
are rejected.  ``--set`` overrides the file, and ``--seed`` overrides both.
Each run writes ``config.resolved`` to its output directory, which can be
passed back with ``--config`` to repeat the run.

Output files (all CSVs have a header row, columns in the order given):

* ``metrics.csv``: step, beta, objective, iw_bound, gap
* ``hist_model.csv``, ``hist_data.csv``: bin_left, bin_right, count
  (first data coordinate, fixed edges from ``hist_range`` and ``bins``)
* ``ablation.csv``: n_steps, n_units, iw_bound, se, gap
* ``eval.csv``: K, iw_bound, se
* ``samples.csv``: x0 .. x{d-1}
* ``interpolate.csv``: path, t, linear_norm, rescaled_norm, linear_x0.., rescaled_x0..
* ``recon.csv``: x0.., recon_x0..
* ``ode.csv``: T, N, variant, ks_stat, mean_abs_e, terminal_mean, terminal_var
* ``lemma1.csv``: c, N, max_D, max_abs_diff
* ``gap.csv``: gap, se, iw_bound, single_bound

Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import flows, hamiltonian, objectives, toydata, trainer
from .autodiff import NonFiniteError, Rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = ("train", "eval", "sample", "interpolate", "recon", "ode", "lemma1", "gap")


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(kind):
    def parse(s: str):
        s = s.strip()
        return [] if s in ("", "none") else [kind(v) for v in s.split(",")]

    return parse


def _opt(kind):
    return lambda s: None if s.strip() in ("", "none") else kind(s)


def _nested(s: str):
    """``-2;2`` style rows separated by ``;`` with comma-separated columns."""
    s = s.strip()
    if s in ("", "none"):
        return None
    return [[float(v) for v in row.split(",")] for row in s.split(";")]


# key -> (parser, default as text)
SCHEMA = {
    # data
    "family": (str, "mog1d"),
    "weights": (_opt(_list(float)), "none"),
    "means": (_nested, "none"),
    "stds": (_nested, "none"),
    "dim": (_opt(int), "none"),
    "n_train": (int, "50000"),
    "n_heldout": (int, "1000"),
    "data_seed": (int, "123"),
    # model
    "n_steps": (int, "5"),
    "unit_dims": (_list(int), "1"),
    "mode": (str, "affine"),
    "hidden": (_list(int), "64,64"),
    "activation": (str, "swish"),
    "tie_parameters": (_bool, "true"),
    "actnorm": (_bool, "false"),
    "clip_bound": (float, "2.5"),
    "target_scale": (float, "0.95"),
    # training
    "lr": (float, "0.001"),
    "batch_size": (int, "64"),
    "updates": (int, "20000"),
    "weight_decay": (float, "0"),
    "anneal_steps": (int, "5000"),
    "K": (int, "100"),
    "log_every": (int, "1000"),
    "n_eval": (int, "256"),
    "objective": (str, "warmup"),
    "seed": (int, "0"),
    "ablate_steps": (_list(int), ""),
    "ablate_units": (_list(int), ""),
    # evaluation and generation
    "checkpoint": (_opt(str), "none"),
    "K_ladder": (_list(int), "1,10,100,1000"),
    "n_samples": (int, "10000"),
    "bins": (int, "60"),
    "hist_range": (_list(float), "-4,4"),
    "n_paths": (int, "8"),
    "n_interp": (int, "11"),
    "n_recon": (int, "100"),
    "gap_K": (int, "1000"),
    # ode laboratory
    "ode_T": (_list(float), "1,2,4,8"),
    "ode_N": (int, "512"),
    "ode_particles": (int, "100000"),
    "ode_mu0": (float, "2"),
    "ode_sigma0": (float, "0.5"),
    "ode_c_phi": (float, "0"),
    "ode_t_start": (float, "0.1"),
    "ode_fitted": (_bool, "true"),
    # error recursion
    "lemma_c": (_list(float), "0.5,1,4"),
    "lemma_N": (_list(int), "10,100,1000"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve_config(config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    """Merge defaults, file, ``--set`` overrides and ``--seed``; returns typed values."""
    raw = {k: v[1] for k, v in SCHEMA.items()}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        raw.update(parse_config_text(path.read_text(), str(path)))
    for item in overrides:
        raw.update(parse_config_text(item, "--set"))
    if seed is not None:
        raw["seed"] = str(seed)
    out = {"_raw": raw}
    for key, (parse, _) in SCHEMA.items():
        try:
            out[key] = parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({exc})") from exc
    return out


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg['_raw'][k]}\n" for k in SCHEMA)


# -- helpers -------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mixture(cfg: dict) -> toydata.MixtureOfGaussians:
    try:
        return toydata.make_dataset(cfg["family"], cfg["weights"], cfg["means"], cfg["stds"], cfg["dim"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _dataset(cfg: dict) -> tuple[toydata.MixtureOfGaussians, trainer.Dataset]:
    mix = _mixture(cfg)
    data = trainer.make_dataset_splits(mix, cfg["n_train"], cfg["n_heldout"], Rng(cfg["data_seed"]))
    return mix, data


def _model_spec(cfg: dict, d_x: int, n_steps=None, n_units=None) -> flows.ModelSpec:
    unit_dims = tuple(cfg["unit_dims"])
    if n_units is not None:
        unit_dims = (unit_dims[0],) * n_units
    try:
        return flows.ModelSpec(
            d_x=d_x,
            unit_dims=unit_dims,
            n_steps=n_steps or cfg["n_steps"],
            mode=cfg["mode"],
            hidden=tuple(cfg["hidden"]),
            activation=cfg["activation"],
            tie_parameters=cfg["tie_parameters"],
            actnorm=cfg["actnorm"],
            clip_bound=cfg["clip_bound"],
            target_scale=cfg["target_scale"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg: dict) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            lr=cfg["lr"],
            batch_size=cfg["batch_size"],
            updates=cfg["updates"],
            weight_decay=cfg["weight_decay"],
            anneal_steps=cfg["anneal_steps"],
            K=cfg["K"],
            seed=cfg["seed"],
            log_every=cfg["log_every"],
            n_eval=cfg["n_eval"],
            objective=cfg["objective"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def histogram(x: np.ndarray, bins: int, lo: float, hi: float) -> list[tuple[float, float, int]]:
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(np.asarray(x).reshape(len(x), -1)[:, 0], bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def _load(cfg: dict):
    path = cfg["checkpoint"]
    if path is None:
        raise ConfigError("this command needs checkpoint = PATH")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return trainer.load_checkpoint(path)
    except trainer.CheckpointError as exc:
        raise ConfigError(str(exc)) from exc


def _data_from_checkpoint(cfg: dict, echo: dict):
    """Rebuild the training data from a checkpoint's config echo when present."""
    raw = echo.get("resolved")
    if raw:
        keys = ("family", "weights", "means", "stds", "dim", "n_train", "n_heldout", "data_seed")
        cfg = dict(cfg)
        for k in keys:
            cfg[k] = SCHEMA[k][0](raw[k])
    return _dataset(cfg)


# -- commands ------------------------------------------------------------------


def _train_one(cfg, data, spec):
    try:
        model = flows.build_model(spec, Rng(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tc = _train_config(cfg)
    state = trainer.fresh_state(model, tc)
    trainer.train(model, data, tc, state)
    return model, state, tc


def cmd_train(cfg: dict, out: Path) -> int:
    mix, data = _dataset(cfg)
    if cfg["ablate_steps"] or cfg["ablate_units"]:
        steps = cfg["ablate_steps"] or [cfg["n_steps"]]
        units = cfg["ablate_units"] or [len(cfg["unit_dims"])]
        rows = []
        for n in steps:
            for L in units:
                spec = _model_spec(cfg, mix.dim, n, L)
                model, _, tc = _train_one(cfg, data, spec)
                iw, se, gap = trainer.evaluate_bound(model, data.heldout, tc.K, Rng(cfg["seed"] + 99))
                rows.append((n, L, iw, se, gap))
                print(f"N={n} L={L} iw_bound={iw:.4f} se={se:.4f} gap={gap:.4f}")
        _write_csv(out / "ablation.csv", ["n_steps", "n_units", "iw_bound", "se", "gap"], rows)
        return EXIT_OK
    spec = _model_spec(cfg, mix.dim)
    model, state, tc = _train_one(cfg, data, spec)
    trainer.save_checkpoint(out / "checkpoint.anf", model, state, {"train": tc.to_dict(), "resolved": cfg["_raw"]})
    cols = ["step", "beta", "objective", "iw_bound", "gap"]
    _write_csv(out / "metrics.csv", cols, [[r[c] for c in cols] for r in state.metrics])
    lo, hi = cfg["hist_range"]
    xs = flows.sample(model, cfg["n_samples"], Rng(cfg["seed"] + 1))
    ref = mix.sample(cfg["n_samples"], Rng(cfg["seed"] + 2))
    hist_cols = ["bin_left", "bin_right", "count"]
    _write_csv(out / "hist_model.csv", hist_cols, histogram(xs, cfg["bins"], lo, hi))
    _write_csv(out / "hist_data.csv", hist_cols, histogram(ref, cfg["bins"], lo, hi))
    iw, se, gap = trainer.evaluate_bound(model, data.heldout, tc.K, Rng(cfg["seed"] + 99))
    summary = {
        "iw_bound": iw,
        "iw_se": se,
        "gap": gap,
        "true_cross_entropy": float(-mix.log_density(data.heldout).mean()),
        "steps": state.step,
        "spec_digest": spec.digest(),
    }
    _write_json(out / "summary.json", summary)
    print(f"held-out iw_bound={iw:.4f} (se {se:.4f}) gap={gap:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    model, _, echo = _load(cfg)
    mix, data = _data_from_checkpoint(cfg, echo)
    rows = []
    for K in cfg["K_ladder"]:
        iw = objectives.iw_log_marginal(model, data.heldout, K, Rng(cfg["seed"] + K))
        rows.append((K, float(iw.mean()), float(iw.std(ddof=1) / np.sqrt(iw.size))))
        print(f"K={K} iw_bound={rows[-1][1]:.4f} se={rows[-1][2]:.4f}")
    _write_csv(out / "eval.csv", ["K", "iw_bound", "se"], rows)
    g = objectives.augmentation_gap(model, data.heldout, Rng(cfg["seed"] + 7), max(cfg["gap_K"], 100))
    summary = {
        "gap": g.gap,
        "gap_se": g.se,
        "true_cross_entropy": float(-mix.log_density(data.heldout).mean()),
        "ladder": [{"K": k, "iw_bound": b, "se": s} for k, b, s in rows],
    }
    _write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_gap(cfg: dict, out: Path) -> int:
    model, _, echo = _load(cfg)
    _, data = _data_from_checkpoint(cfg, echo)
    g = objectives.augmentation_gap(model, data.heldout, Rng(cfg["seed"]), max(cfg["gap_K"], 100))
    _write_csv(out / "gap.csv", ["gap", "se", "iw_bound", "single_bound"], [(g.gap, g.se, g.iw_bound, g.single_bound)])
    print(f"gap={g.gap:.5f} se={g.se:.5f}" + (" (negative: Monte-Carlo noise)" if g.negative else ""))
    return EXIT_OK


def cmd_sample(cfg: dict, out: Path) -> int:
    model, _, _ = _load(cfg)
    xs = flows.sample(model, cfg["n_samples"], Rng(cfg["seed"]))
    _write_csv(out / "samples.csv", [f"x{j}" for j in range(xs.shape[1])], xs.tolist())
    return EXIT_OK


def cmd_interpolate(cfg: dict, out: Path) -> int:
    model, _, echo = _load(cfg)
    _, data = _data_from_checkpoint(cfg, echo)
    rng = Rng(cfg["seed"])
    n = min(cfg["n_paths"], data.heldout.shape[0] // 2)
    if n < 1 or cfg["n_interp"] < 2:
        raise ConfigError("interpolation needs n_paths >= 1 and n_interp >= 2")
    a, b = data.heldout[:n], data.heldout[n : 2 * n]
    units_a = [rng.normal((n, d)) for d in model.unit_dims]
    units_b = [rng.normal((n, d)) for d in model.unit_dims]
    ya, za, _ = flows.hierarchical_forward(model, a, units_a)
    yb, zb, _ = flows.hierarchical_forward(model, b, units_b)
    la = np.concatenate([ya.data] + [z.data for z in za], axis=1)
    lb = np.concatenate([yb.data] + [z.data for z in zb], axis=1)
    ts = np.linspace(0.0, 1.0, cfg["n_interp"])
    d = model.d_x
    splits = np.cumsum([d, *model.unit_dims])[:-1]

    def decode(h):
        parts = np.split(h[None, :], splits, axis=1)
        x, _, _ = flows.hierarchical_inverse(model, parts[0], parts[1:])
        return x.data[0]

    rows = []
    for p in range(n):
        for t in ts:
            # t=0 is the first endpoint, t=1 the second
            lin = flows.linear_interpolate(lb[p], la[p], float(t))
            try:
                res = flows.rescaled_interpolate(lb[p], la[p], float(t))
            except ValueError:
                res = lin
            rows.append((p, float(t), float(np.linalg.norm(lin)), float(np.linalg.norm(res)), *decode(lin), *decode(res)))
    header = ["path", "t", "linear_norm", "rescaled_norm"] + [f"linear_x{j}" for j in range(d)] + [f"rescaled_x{j}" for j in range(d)]
    _write_csv(out / "interpolate.csv", header, rows)
    return EXIT_OK


def cmd_recon(cfg: dict, out: Path) -> int:
    model, _, echo = _load(cfg)
    if model.n_units < 2:
        raise ConfigError("recon needs a hierarchical checkpoint (more than one unit)")
    _, data = _data_from_checkpoint(cfg, echo)
    x = data.heldout[: cfg["n_recon"]]
    xr = flows.lossy_reconstruct(model, x, Rng(cfg["seed"]))
    d = model.d_x
    header = [f"x{j}" for j in range(d)] + [f"recon_x{j}" for j in range(d)]
    _write_csv(out / "recon.csv", header, np.concatenate([x, xr], axis=1).tolist())
    return EXIT_OK


def cmd_ode(cfg: dict, out: Path) -> int:
    if cfg["ode_N"] < 1 or cfg["ode_particles"] < 2 or any(T <= 0 for T in cfg["ode_T"]):
        raise ConfigError("ode needs ode_N >= 1, ode_particles >= 2 and positive ode_T")
    if cfg["ode_sigma0"] <= 0 or cfg["ode_t_start"] <= 0:
        raise ConfigError("ode needs ode_sigma0 > 0 and ode_t_start > 0")
    spec = hamiltonian.OdeSpec(cfg["ode_mu0"], cfg["ode_sigma0"], cfg["ode_c_phi"])
    rows = hamiltonian.theorem1_study(
        spec, cfg["ode_T"], cfg["ode_N"], cfg["ode_particles"], cfg["seed"], cfg["ode_t_start"], cfg["ode_fitted"]
    )
    cols = ["T", "N", "variant", "ks_stat", "mean_abs_e", "terminal_mean", "terminal_var"]
    _write_csv(out / "ode.csv", cols, [[r[c] for c in cols] for r in rows])
    for r in rows:
        print(" ".join(f"{c}={r[c]}" for c in cols))
    return EXIT_OK


def cmd_lemma1(cfg: dict, out: Path) -> int:
    if any(N < 1 for N in cfg["lemma_N"]) or any(c <= 0 for c in cfg["lemma_c"]):
        raise ConfigError("lemma1 needs every N >= 1 and every c > 0")
    rows = []
    for c in cfg["lemma_c"]:
        for N in cfg["lemma_N"]:
            D, mx = hamiltonian.lemma1_recursion(c, N)
            closed = np.array([hamiltonian.lemma1_closed_form(c, N, n) for n in range(1, N + 1)])
            rows.append((c, N, mx, float(np.abs(D[1:] - closed).max())))
    _write_csv(out / "lemma1.csv", ["c", "N", "max_D", "max_abs_diff"], rows)
    for r in rows:
        print(f"c={r[0]} N={r[1]} max_D={r[2]:.6g} max_abs_diff={r[3]:.3g}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "recon": cmd_recon,
    "ode": cmd_ode,
    "lemma1": cmd_lemma1,
    "gap": cmd_gap,
}


class _Lock:
    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigError(f"output directory is locked by another run: {self.path}") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anf", description="Augmented normalizing flow experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, help="overrides the seed key")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _Lock(out):
            (out / "config.resolved").write_text(format_config(cfg))
            return HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.TrainingDiverged, NonFiniteError, FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
