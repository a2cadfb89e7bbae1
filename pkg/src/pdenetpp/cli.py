"""Config-driven command line for the hybrid PDE toolkit.

Subcommands: generate (reference datasets), train (one-step fitting with a
checkpoint + loss CSV), evaluate (rollout metrics on a test set), rollout
(trajectory export with PGM heatmaps), schemes (classical 1-D advection
demos). Every command reads a JSON config via --config, writes into the
directory given by --out (or the config key "out"), and accepts --seed to
override the config seed. Exit codes: 0 success, 2 bad usage or config,
3 numerical failure (blow-up or non-finite loss).

Setting PDENETPP_THREADS caps the BLAS/FFT worker pools (the toolkit itself
is single-process).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import pdnx, schemes
from .model import CHANNELS, build_model
from .pdnx import atomic_write_bytes
from .solvers import Dataset, PdeConfig, default_config, generate_dataset
from .training import TrainConfig, evaluate, rollout, train


class ConfigError(Exception):
    """Bad or inconsistent configuration; maps to exit code 2."""


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _dump_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def _csv_cell(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path, header, rows):
    lines = [header]
    lines.extend(",".join(_csv_cell(v) for v in row) for row in rows)
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def _check_keys(cfg, required, optional, what):
    if not isinstance(cfg, dict):
        raise ConfigError(f"{what} must be a JSON object")
    keys = set(cfg)
    missing = sorted(required - keys)
    if missing:
        raise ConfigError(f"{what} missing keys: {', '.join(missing)}")
    unknown = sorted(keys - required - set(optional))
    if unknown:
        raise ConfigError(f"{what} has unknown keys: {', '.join(unknown)}")


def write_pgm(path, frame):
    """Render one 2-D field as an 8-bit binary PGM with min-max scaling.

    Returns the (min, max) bounds used; a constant frame maps to mid-gray.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("PGM frames must be 2-D")
    lo, hi = float(frame.min()), float(frame.max())
    if hi > lo:
        scaled = np.round(255.0 * (frame - lo) / (hi - lo))
    else:
        scaled = np.full(frame.shape, 128.0)
    header = f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.astype(np.uint8).tobytes())
    return lo, hi


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, recipe, directory):
    """Write every model parameter as a tensor blob plus a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name, tensor in model.param_items():
        fname = name + ".pdnx"
        pdnx.write_pdnx(os.path.join(directory, fname), tensor.data)
        entries.append({"name": name, "shape": list(tensor.data.shape), "file": fname})
    manifest = {"format": "checkpoint", "version": 1, "model": recipe, "parameters": entries}
    _dump_json(os.path.join(directory, "manifest.json"), manifest)


def load_checkpoint(directory):
    """Rebuild the model named by a checkpoint manifest and load its weights."""
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise ConfigError(f"missing checkpoint at {directory}")
    manifest = _load_json(path)
    model = build_model(**manifest["model"])
    lookup = dict(model.param_items())
    for entry in manifest["parameters"]:
        name = entry["name"]
        if name not in lookup:
            raise ConfigError(f"checkpoint parameter {name!r} not in the model")
        data = pdnx.read_pdnx(os.path.join(directory, entry["file"]))
        if data.shape != lookup[name].data.shape:
            raise ConfigError(f"checkpoint parameter {name!r} has the wrong shape")
        lookup[name].data = data
    return model, manifest


# ---------------------------------------------------------------------------
# datasets


def _load_dataset(path):
    meta_path = os.path.join(path, "metadata.json")
    if not os.path.isfile(meta_path):
        raise ConfigError(f"missing dataset at {path}")
    meta = _load_json(meta_path)
    config = PdeConfig(**meta["config"])
    files = meta["files"]
    clean = pdnx.read_pdnx(os.path.join(path, files["clean"]))
    noisy = pdnx.read_pdnx(os.path.join(path, files["noisy"])) if "noisy" in files else None
    forcing = pdnx.read_pdnx(os.path.join(path, files["forcing"])) if "forcing" in files else None
    return Dataset(config=config, clean=clean, noisy=noisy, seed=meta["seed"], forcing=forcing), meta


def cmd_generate(cfg, out, seed_override):
    _check_keys(
        cfg,
        {"pde", "trajectories", "steps"},
        {"seed", "noise", "fine", "coarse", "dt", "ratio", "coefficient", "out"},
        "generate config",
    )
    overrides = {k: cfg[k] for k in ("fine", "coarse", "dt", "ratio", "coefficient") if k in cfg}
    try:
        config = default_config(cfg["pde"], **overrides)
    except KeyError:
        raise ConfigError(f"unknown pde {cfg['pde']!r}") from None
    n, steps = int(cfg["trajectories"]), int(cfg["steps"])
    if n < 1 or steps < 1:
        raise ConfigError("need at least one trajectory and one step")
    seed = int(cfg.get("seed", 0)) if seed_override is None else int(seed_override)
    noise = float(cfg.get("noise", 0.001))
    ds = generate_dataset(config, n, steps, seed, with_noise=noise > 0.0, noise_amplitude=noise)
    files = {"clean": "clean.pdnx"}
    pdnx.write_pdnx(os.path.join(out, "clean.pdnx"), ds.clean)
    if ds.noisy is not None:
        files["noisy"] = "noisy.pdnx"
        pdnx.write_pdnx(os.path.join(out, "noisy.pdnx"), ds.noisy)
    if ds.forcing is not None:
        files["forcing"] = "forcing.pdnx"
        pdnx.write_pdnx(os.path.join(out, "forcing.pdnx"), ds.forcing)
    meta = {
        "pde": cfg["pde"],
        "config": dataclasses.asdict(ds.config),
        "seed": seed,
        "noise": noise,
        "trajectories": n,
        "steps": steps,
        "dt": ds.config.dt,
        "delta_t": ds.config.delta_t,
        "files": files,
        "shape": list(ds.clean.shape),
    }
    _dump_json(os.path.join(out, "metadata.json"), meta)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated contents of a training config file."""

    pde: str
    method: str
    backbone: str
    dataset: str
    backbone_opts: dict
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lam: float = 0.001
    L: int = 2
    r: int = 2
    hidden: int = 16
    seed: int = 0

    @classmethod
    def from_mapping(cls, cfg, seed_override=None):
        _check_keys(
            cfg,
            {"pde", "method", "backbone", "dataset"},
            {"backbone_opts", "epochs", "batch_size", "lr", "lambda", "L", "r", "hidden", "seed", "out"},
            "train config",
        )
        seed = cfg.get("seed", 0) if seed_override is None else seed_override
        return cls(
            pde=cfg["pde"],
            method=cfg["method"],
            backbone=cfg["backbone"],
            dataset=cfg["dataset"],
            backbone_opts=dict(cfg.get("backbone_opts", {})),
            epochs=int(cfg.get("epochs", 10)),
            batch_size=int(cfg.get("batch_size", 16)),
            lr=float(cfg.get("lr", 1e-3)),
            lam=float(cfg.get("lambda", 0.001)),
            L=int(cfg.get("L", 2)),
            r=int(cfg.get("r", 2)),
            hidden=int(cfg.get("hidden", 16)),
            seed=int(seed),
        )


def cmd_train(cfg, out, seed_override):
    exp = ExperimentConfig.from_mapping(cfg, seed_override)
    ds, _ = _load_dataset(exp.dataset)
    if exp.pde != ds.config.pde:
        raise ConfigError(
            f"config pde {exp.pde!r} does not match the dataset ({ds.config.pde!r})"
        )
    spacing = ds.config.coarse_spacing
    model = build_model(
        exp.pde,
        exp.method,
        exp.backbone,
        ds.config.coefficient,
        spacing,
        spacing,
        ds.config.dt,
        seed=exp.seed,
        L=exp.L,
        r=exp.r,
        hidden=exp.hidden,
        backbone_opts=exp.backbone_opts,
    )
    tcfg = TrainConfig(
        epochs=exp.epochs, batch_size=exp.batch_size, lr=exp.lr, lam=exp.lam, seed=exp.seed
    )
    log = []
    train(model, ds, tcfg, epoch_log=log)
    recipe = {
        "pde": exp.pde,
        "method": exp.method,
        "backbone_kind": exp.backbone,
        "coefficient": ds.config.coefficient,
        "dx": spacing,
        "dy": spacing,
        "dt": ds.config.dt,
        "seed": exp.seed,
        "L": exp.L,
        "r": exp.r,
        "hidden": exp.hidden,
        "backbone_opts": exp.backbone_opts,
    }
    save_checkpoint(model, recipe, os.path.join(out, "checkpoint"))
    _write_csv(
        os.path.join(out, "loss.csv"),
        "epoch,loss,pred_loss,reg_loss",
        [(e["epoch"], e["loss"], e["pred_loss"], e["reg_loss"]) for e in log],
    )


# ---------------------------------------------------------------------------
# evaluation and rollout


def cmd_evaluate(cfg, out, seed_override):
    _check_keys(cfg, {"checkpoint", "dataset"}, {"threshold", "out"}, "evaluate config")
    model, manifest = load_checkpoint(cfg["checkpoint"])
    ds, _ = _load_dataset(cfg["dataset"])
    channels = CHANNELS[manifest["model"]["pde"]]
    if ds.clean.ndim != 5 or ds.clean.shape[2] != channels:
        raise ConfigError("dataset shape does not match the checkpointed model")
    report = evaluate(model, ds, threshold=float(cfg.get("threshold", 1.0)))
    # Every trajectory failing leaves no finite average; null keeps the
    # report parseable by strict JSON readers.
    avg = report.avg_l2 if np.isfinite(report.avg_l2) else None
    _dump_json(
        os.path.join(out, "report.json"),
        {
            "avg_l2_error": avg,
            "sr_percent": report.sr,
            "n_failed": len(report.failed),
        },
    )
    rows = []
    for i in range(report.errors.shape[0]):
        flag = int(i in report.failed)
        for j in range(report.errors.shape[1]):
            rows.append((i, j + 1, report.errors[i, j], flag))
    _write_csv(
        os.path.join(out, "trajectories.csv"), "trajectory,step,rel_error,failed_flag", rows
    )


def cmd_rollout(cfg, out, seed_override):
    _check_keys(
        cfg, {"checkpoint", "initial", "steps"}, {"frames", "channel", "out"}, "rollout config"
    )
    steps = int(cfg["steps"])
    if steps < 0:
        raise ConfigError("steps must be nonnegative")
    model, manifest = load_checkpoint(cfg["checkpoint"])
    if not os.path.isfile(cfg["initial"]):
        raise ConfigError(f"missing initial state file {cfg['initial']}")
    u0 = pdnx.read_pdnx(cfg["initial"])
    if u0.ndim == 4 and u0.shape[0] == 1:
        u0 = u0[0]
    if u0.ndim != 3 or u0.shape[0] != CHANNELS[manifest["model"]["pde"]]:
        raise ConfigError("initial state must have shape (channels, H, W)")
    result = rollout(model, u0, steps)
    pdnx.write_pdnx(os.path.join(out, "trajectory.pdnx"), result.snapshots)
    recorded = result.snapshots.shape[0]
    frames = cfg.get("frames")
    frames = list(range(recorded)) if frames is None else [int(k) for k in frames]
    channel = int(cfg.get("channel", 0))
    if not 0 <= channel < u0.shape[0]:
        raise ConfigError("channel out of range")
    sidecar = []
    for k in frames:
        if not 0 <= k < recorded:
            raise ConfigError(f"frame {k} outside the recorded trajectory")
        fname = f"frame_{k:04d}.pgm"
        lo, hi = write_pgm(os.path.join(out, fname), result.snapshots[k, channel])
        sidecar.append({"file": fname, "step": k, "min": lo, "max": hi})
    _dump_json(os.path.join(out, "frames.json"), {"channel": channel, "frames": sidecar})


# ---------------------------------------------------------------------------
# classical scheme demos


def _weno_step(U, mu):
    F = mu * schemes.weno3_reconstruct(U)
    return U - (F - np.roll(F, 1))


_SCHEME_STEPPERS = {
    "upwind1": lambda U, mu: schemes.upwind_step_1(U, mu),
    "upwind2": lambda U, mu: schemes.upwind_step_2(U, mu),
    "minmod": lambda U, mu: schemes.flux_limited_step(U, mu, "minmod"),
    "vanleer": lambda U, mu: schemes.flux_limited_step(U, mu, "vanleer"),
    "weno3": _weno_step,
}

# flux-form demos assume rightward transport within the CFL limit
_NEEDS_UNIT_CFL = {"minmod", "vanleer", "weno3"}


def _profile(name):
    if name == "sine":
        return lambda x: np.sin(2.0 * np.pi * x)
    if name == "square":
        return lambda x: np.where((x % 1.0 >= 0.25) & (x % 1.0 < 0.75), 1.0, 0.0)
    raise ConfigError(f"unknown profile {name!r}")


def cmd_schemes(cfg, out, seed_override):
    _check_keys(cfg, {"mu"}, {"schemes", "cells", "steps", "profile", "out"}, "schemes config")
    mu = float(cfg["mu"])
    cells = int(cfg.get("cells", 100))
    steps = int(cfg.get("steps", 100))
    if cells < 8 or steps < 1:
        raise ConfigError("need at least 8 cells and one step")
    profile_name = cfg.get("profile", "square")
    names = cfg.get("schemes", sorted(_SCHEME_STEPPERS))
    unknown = [n for n in names if n not in _SCHEME_STEPPERS]
    if unknown:
        raise ConfigError(f"unknown schemes: {', '.join(unknown)}")

    warning = None
    skipped = []
    if not 0.0 < mu <= 1.0:
        warning = f"CFL number {mu} outside (0, 1]; flux-form demos skipped"
        skipped = sorted(set(names) & _NEEDS_UNIT_CFL)
        names = [n for n in names if n not in _NEEDS_UNIT_CFL]

    fn = _profile(profile_name)
    dx = 1.0 / cells
    x = (np.arange(cells) + 0.5) * dx
    files = {}
    for name in names:
        U = fn(x)
        rows = [(0, schemes.total_variation(U), 0.0)]
        for m in range(1, steps + 1):
            U = _SCHEME_STEPPERS[name](U, mu)
            exact = fn(x - mu * m * dx)
            scale = np.linalg.norm(exact)
            err = np.linalg.norm(U - exact) / (scale if scale > 0 else 1.0)
            rows.append((m, schemes.total_variation(U), err))
        fname = f"{name}.csv"
        _write_csv(os.path.join(out, fname), "step,tv,l2_error", rows)
        files[name] = fname
    _dump_json(
        os.path.join(out, "schemes.json"),
        {
            "mu": mu,
            "cells": cells,
            "steps": steps,
            "profile": profile_name,
            "warning": warning,
            "skipped": skipped,
            "files": files,
        },
    )


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "generate": (cmd_generate, "simulate reference trajectories and write a dataset"),
    "train": (cmd_train, "fit a model on one-step pairs; writes checkpoint + loss CSV"),
    "evaluate": (cmd_evaluate, "score rollouts of a checkpoint against a test dataset"),
    "rollout": (cmd_rollout, "roll a checkpoint forward and render PGM heatmaps"),
    "schemes": (cmd_schemes, "run classical 1-D advection demos, one CSV per scheme"),
}


def _apply_thread_cap():
    cap = os.environ.get("PDENETPP_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def main(argv=None):
    _apply_thread_cap()
    parser = argparse.ArgumentParser(
        prog="pdenetpp",
        description="Hybrid simulation of partially known PDEs: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", help="output directory (overrides the config key 'out')")
        p.add_argument("--seed", type=int, help="override the config seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        cfg = _load_json(args.config)
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        out = args.out or cfg.get("out")
        if not out:
            raise ConfigError("no output directory; pass --out or set 'out' in the config")
        os.makedirs(out, exist_ok=True)
        # Blow-ups are detected explicitly and reported as exit code 3, so
        # numpy's own overflow chatter on the way there is just noise.
        with np.errstate(over="ignore", invalid="ignore"):
            _COMMANDS[args.command][0](cfg, out, args.seed)
    except (ConfigError, ValueError, TypeError, FileNotFoundError) as exc:
        print(f"pdenetpp: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"pdenetpp: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0
