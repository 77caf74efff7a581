"""Command-line entry point: ``adapos {simulate,train,sweep,replicate-grid}``.

Configuration is a TOML file layered over built-in defaults.  Environment
variables ``ADAPOS_<SECTION>__<KEY>=value`` override the file, and command-line
flags override both.  Exit codes: 0 success, 2 configuration error,
3 numeric divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import (AdaposError, ComparabilityError, ConfigurationError, DivergenceError,
                     FormatError)
from .evaluation import ModelEntry, sweep, write_heatmap_svg, write_sweep_csv
from .metrics import PseudoDistanceProvider, cache_key, load_matrix_cache, save_matrix_cache
from .models import ModelConfig, build_model, load_checkpoint
from .rngs import derive_seed
from .sim import (default_environment, generate_dataset, generate_trajectory, read_dataset,
                  write_dataset, write_dataset_csv)
from .training import Strategy, TrainConfig, train, write_loss_csv

log = logging.getLogger("adapos")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
ENV_PREFIX = "ADAPOS_"

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "environment": {
        "width": 20.0, "height": 20.0, "n_antennas": 6, "layout": "perimeter",
        "n_scatterers": 24, "bandwidth_hz": 100e6, "carrier_hz": 100e6, "noise_std": 0.01,
    },
    "trajectory": {"rate_hz": 6.6, "max_speed": 1.0, "train_duration_s": 600.0, "test_duration_s": 150.0},
    "metric": {"mode": "fused-geodesic", "speed": 1.0, "cap": 5.0, "k": 10},
    "model": {
        "arch": "adapos", "d_model": 256, "heads": 8, "d_ff": 1024, "layers": 3,
        "stem": 16, "blocks": [16, 32, 64], "head_hidden": 128, "head_gain": 300.0,
    },
    "train": {
        "strategy": "random-n", "batch_size": 64, "epochs": 1, "steps": 0, "lr": 3e-4,
        "warmup_steps": 500, "weight_decay": 1e-4,
    },
    "sweep": {"n_e": [], "batch_size": 256},
    "grid": {"architectures": ["adapos", "baseline"], "n_t_min": 2},
    "data": {"train": "", "test": ""},
}
# keys that never influence results and are left out of the config hash
_UNHASHED = ("out",)


def _type_name(v) -> str:
    return type(v).__name__


def _coerce(path: str, default, value):
    """Validate ``value`` against the type of ``default``."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigurationError(f"config field '{path}': expected {_type_name(default)}, got {value!r}")


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError(f"config field '{path}' is not recognized")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config field '{path}' must be a table")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(path, base[key], value)
    return out


def _parse_env_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    """``ADAPOS_TRAIN__STEPS=10`` -> ``{"train": {"steps": 10}}``."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = _parse_env_value(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            cfg = _merge(cfg, tomllib.loads(text))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = _merge(cfg, env_overrides(environ))
    if overrides:
        cfg = _merge(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    env = cfg["environment"]
    if env["n_antennas"] < 2:
        raise ConfigurationError("config field 'environment.n_antennas' must be >= 2")
    if cfg["metric"]["mode"] not in ("timestamp", "cir", "fused-geodesic"):
        raise ConfigurationError(f"config field 'metric.mode': unknown mode {cfg['metric']['mode']!r}")
    if cfg["model"]["arch"] not in ("adapos", "baseline"):
        raise ConfigurationError(f"config field 'model.arch': unknown architecture {cfg['model']['arch']!r}")
    try:
        Strategy.parse(cfg["train"]["strategy"])
    except ConfigurationError as exc:
        raise ConfigurationError(f"config field 'train.strategy': {exc}") from None
    for arch in cfg["grid"]["architectures"]:
        if arch not in ("adapos", "baseline"):
            raise ConfigurationError(f"config field 'grid.architectures': unknown architecture {arch!r}")


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _paths(cfg: dict) -> dict:
    out = Path(cfg["out"])
    return {
        "out": out,
        "train": Path(cfg["data"]["train"]) if cfg["data"]["train"] else out / "data" / "train.cirds",
        "test": Path(cfg["data"]["test"]) if cfg["data"]["test"] else out / "data" / "test.cirds",
        "checkpoints": out / "checkpoints",
        "losses": out / "losses",
        "sweep": out / "sweep",
        "cache": out / "cache",
    }


def _slug(arch: str, strategy: str) -> str:
    return f"{arch}_{strategy.replace(':', '-')}"


# -- stages --------------------------------------------------------------------

def _environment(cfg: dict):
    e = cfg["environment"]
    return default_environment(
        seed=derive_seed(cfg["seed"], "environment"), layout=e["layout"], n_antennas=e["n_antennas"],
        width=e["width"], height=e["height"], n_scatterers=e["n_scatterers"],
        bandwidth_hz=e["bandwidth_hz"], noise_std=e["noise_std"], carrier_hz=e["carrier_hz"])


def cmd_simulate(cfg: dict) -> dict:
    """Write train/test datasets, their CSV mirrors, and a provenance sidecar."""
    paths = _paths(cfg)
    env = _environment(cfg)
    t = cfg["trajectory"]
    written = {}
    for split, duration in (("train", t["train_duration_s"]), ("test", t["test_duration_s"])):
        traj = generate_trajectory(env, duration, t["rate_hz"], t["max_speed"],
                                   derive_seed(cfg["seed"], "trajectory", split))
        data = generate_dataset(env, traj, derive_seed(cfg["seed"], "noise", split))
        target = paths[split]
        target.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(target, data)
        write_dataset_csv(target.with_suffix(".csv"), data)
        written[split] = {"file": target.name, "sha256": file_digest(target), "samples": len(data) * data.a_max}
    provenance = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "tool_version": __version__,
                  "datasets": written}
    sidecar = paths["train"].parent / "provenance.json"
    sidecar.write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    log.info("simulated %s", ", ".join(f"{k}: {v['samples']} CIRs" for k, v in written.items()))
    return provenance


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _provider(cfg: dict, dataset, dataset_path: Path) -> PseudoDistanceProvider:
    m = cfg["metric"]
    provider = PseudoDistanceProvider(dataset, m["mode"], m["speed"], m["cap"], m["k"]) \
        if m["mode"] != "fused-geodesic" else None
    if provider is not None:
        return provider
    paths = _paths(cfg)
    key = cache_key(file_digest(dataset_path), m["mode"], m)
    cache = paths["cache"] / f"metric_{key[:16]}.npz"
    matrix = load_matrix_cache(cache, key)
    provider = PseudoDistanceProvider(dataset, m["mode"], m["speed"], m["cap"], m["k"], matrix=matrix)
    if matrix is None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_matrix_cache(cache, provider.matrix(), key)
    return provider


def _model_config(cfg: dict, a_max: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(a_max=a_max, d_model=m["d_model"], heads=m["heads"], d_ff=m["d_ff"],
                       layers=m["layers"], stem=m["stem"], blocks=tuple(m["blocks"]),
                       head_hidden=m["head_hidden"], head_gain=m["head_gain"])


def _train_config(cfg: dict, strategy: Strategy, arch: str) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(strategy=strategy, batch_size=t["batch_size"], epochs=t["epochs"],
                       steps=t["steps"] or None, lr=t["lr"], warmup_steps=t["warmup_steps"],
                       weight_decay=t["weight_decay"],
                       seed=derive_seed(cfg["seed"], "train", arch, str(strategy)),
                       metric=cfg["metric"]["mode"])


def train_cell(cfg: dict, arch: str, strategy_text: str) -> dict:
    """Train one (architecture, strategy) cell; returns the written artifact paths."""
    paths = _paths(cfg)
    dataset_path = _require(paths["train"], "training dataset")
    dataset = read_dataset(dataset_path)
    strategy = Strategy.parse(strategy_text)
    strategy.validate(dataset.a_max)
    provider = _provider(cfg, dataset, dataset_path)
    model = build_model(arch, _model_config(cfg, dataset.a_max),
                        seed=derive_seed(cfg["seed"], "init", arch, str(strategy)))
    slug = _slug(arch, str(strategy))
    paths["checkpoints"].mkdir(parents=True, exist_ok=True)
    paths["losses"].mkdir(parents=True, exist_ok=True)
    ckpt = paths["checkpoints"] / f"{slug}.ckpt"
    result = train(model, dataset, provider, _train_config(cfg, strategy, arch), checkpoint_path=ckpt,
                   checkpoint_extra={"config_hash": config_hash(cfg), "dataset_sha256": file_digest(dataset_path)})
    loss_csv = paths["losses"] / f"{slug}.csv"
    write_loss_csv(loss_csv, result.log)
    return {"arch": arch, "strategy": str(strategy), "checkpoint": str(ckpt), "loss_csv": str(loss_csv),
            "final_loss": result.log[-1].loss}


def cmd_train(cfg: dict) -> dict:
    return train_cell(cfg, cfg["model"]["arch"], cfg["train"]["strategy"])


def run_sweep(cfg: dict, checkpoints, out_dir: Path | None = None, svg_per_arch: bool = False) -> dict:
    paths = _paths(cfg)
    models, a_max = [], None
    for ckpt in checkpoints:
        model, header = load_checkpoint(_require(Path(ckpt), "checkpoint"))
        if a_max is None:
            a_max = model.config.a_max
        elif model.config.a_max != a_max:
            raise ComparabilityError(f"{ckpt} was trained for a_max={model.config.a_max}, others for {a_max}")
        models.append(ModelEntry(header["arch"], header["strategy"].get("strategy", "?"), model))
    if not models:
        raise ConfigurationError("sweep needs at least one checkpoint")
    test = read_dataset(_require(paths["test"], "test dataset"))
    if test.a_max != a_max:
        raise ComparabilityError(f"test dataset has {test.a_max} antennas, checkpoints expect {a_max}")
    n_e_values = cfg["sweep"]["n_e"] or list(range(2, a_max + 1))
    result = sweep(models, test, n_e_values, derive_seed(cfg["seed"], "sweep"), cfg["sweep"]["batch_size"])
    out_dir = out_dir or paths["sweep"]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out_dir / "sweep.csv", result)
    write_heatmap_svg(out_dir / "heatmap.svg", result, title="MAE by training strategy and n_e")
    provenance = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "tool_version": __version__,
                  "checkpoints": [file_digest(c) for c in checkpoints]}
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    written = {"csv": str(out_dir / "sweep.csv"), "svg": [str(out_dir / "heatmap.svg")]}
    if svg_per_arch:
        for tag in dict.fromkeys(m.tag for m in models):
            target = out_dir / f"heatmap_{tag}.svg"
            write_heatmap_svg(target, result, [tag], title=tag)
            written["svg"].append(str(target))
    return written


def cmd_sweep(cfg: dict, checkpoints) -> dict:
    return run_sweep(cfg, checkpoints)


def grid_cells(cfg: dict, a_max: int) -> list[tuple[str, str]]:
    lo = cfg["grid"]["n_t_min"]
    strategies = [f"fixed-n:{n}" for n in range(lo, a_max + 1)] + ["random-n"]
    return [(arch, s) for arch in cfg["grid"]["architectures"] for s in strategies]


def _train_cell_job(args):
    cfg, arch, strategy = args
    return train_cell(cfg, arch, strategy)


def cmd_replicate_grid(cfg: dict, jobs: int = 1) -> dict:
    """Simulate (if needed), train every grid cell, then sweep; resumable via a manifest."""
    paths = _paths(cfg)
    paths["out"].mkdir(parents=True, exist_ok=True)
    manifest_path = paths["out"] / "manifest.json"
    digest = config_hash(cfg)
    manifest = {"config_hash": digest, "tool_version": __version__, "cells": {}}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("config_hash") != digest:
            raise ConfigurationError(f"{manifest_path} was written for a different configuration "
                                     f"(hash {manifest.get('config_hash', '?')[:12]}); use a fresh output directory")

    def save():
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    if not manifest.get("simulated") or not paths["train"].exists() or not paths["test"].exists():
        cmd_simulate(cfg)
        manifest["simulated"] = True
        save()
    a_max = read_dataset(paths["train"]).a_max
    cells = grid_cells(cfg, a_max)
    todo = [(a, s) for a, s in cells
            if not (_slug(a, s) in manifest["cells"]
                    and Path(manifest["cells"][_slug(a, s)]["checkpoint"]).exists())]
    if todo:
        # fill the metric cache once so parallel workers only read it
        dataset = read_dataset(paths["train"])
        _provider(cfg, dataset, paths["train"])
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for info in pool.map(_train_cell_job, [(cfg, a, s) for a, s in todo]):
                manifest["cells"][_slug(info["arch"], info["strategy"])] = info
                save()
    else:
        for arch, strategy in todo:
            info = train_cell(cfg, arch, strategy)
            manifest["cells"][_slug(arch, strategy)] = info
            save()
    checkpoints = [manifest["cells"][_slug(a, s)]["checkpoint"] for a, s in cells]
    manifest["sweep"] = run_sweep(cfg, checkpoints, svg_per_arch=True)
    save()
    return manifest


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapos", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate synthetic train/test datasets")
    p_train = sub.add_parser("train", parents=[common], help="train one model")
    p_train.add_argument("--strategy", help="fixed-n:<k> or random-n")
    p_train.add_argument("--arch", choices=["adapos", "baseline"])
    p_sweep = sub.add_parser("sweep", parents=[common], help="evaluate checkpoints over n_e")
    p_sweep.add_argument("checkpoints", nargs="+")
    sub.add_parser("replicate-grid", parents=[common], help="train and sweep the full strategy grid")
    return parser


def _flag_overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    if getattr(args, "strategy", None):
        out.setdefault("train", {})["strategy"] = args.strategy
    if getattr(args, "arch", None):
        out.setdefault("model", {})["arch"] = args.arch
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        if args.command == "simulate":
            result = cmd_simulate(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "sweep":
            result = cmd_sweep(cfg, args.checkpoints)
        else:
            result = cmd_replicate_grid(cfg, jobs=args.jobs)
    except DivergenceError as exc:
        print(f"adapos: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, ComparabilityError) as exc:
        print(f"adapos: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"adapos: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AdaposError as exc:
        print(f"adapos: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
