"""Command-line entry point: ``uniflow <command> [--config run.json] [flags]``.

Commands read one JSON run configuration (validated against ``CONFIG_SCHEMA``);
command-line flags override the matching file values. Failures print a JSON
object ``{"error": ..., "message": ..., "command": ...}`` to stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import TaskSpec, load_dataset, save_dataset
from .evaluation import (
    FEWSHOT_FRACTIONS,
    PROTOCOLS,
    ablate,
    bank_ablation_configs,
    cosine,
    noise_eval,
    protocol_baseline,
    protocol_predict,
    retrieval_signature,
    unit_count_configs,
    write_reports,
    zero_few_shot,
)
from .model import ModelConfig
from .patching import PatchConfig
from .synth import TARGET_MARKER, gen_suite
from .training import TrainConfig, build_model, prepare, train
from .validation import check_fraction, check_noise_level


COMMANDS = ("gen", "train", "eval", "ablate", "shot", "inspect-memory")
MANIFEST = "manifest.json"
FINAL_CHECKPOINT = "model.ckpt"

_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "out": {"type": "string", "minLength": 1},
        "data_dir": {"type": "string", "minLength": 1},
        "datasets": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
        "target": {"type": "string", "minLength": 1},
        "checkpoint": {"type": "string", "minLength": 1},
        "protocol": {"enum": ["short", "long"]},
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["history_len", "horizon_len"],
            "properties": {"history_len": _POS_INT, "horizon_len": _POS_INT},
        },
        "gen": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T": {"type": "integer", "minimum": 100}},
        },
        "patch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"p_t": _POS_INT, "p_s": _POS_INT, "d_model": _POS_INT, "num_subgraphs": _POS_INT},
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enc_layers": _POS_INT,
                "dec_layers": _POS_INT,
                "d_model": _POS_INT,
                "heads": _POS_INT,
                "ff_mult": _POS_INT,
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "n_mem": _POS_INT,
                "banks": {
                    "type": "array",
                    "uniqueItems": True,
                    "items": {"enum": ["time", "freq", "time_spatial", "freq_spatial"]},
                },
                "max_blocks": _POS_INT,
                "max_units": _POS_INT,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_epochs": {"type": "integer", "minimum": 0},
                "lr_initial": _POS_NUM,
                "lr_late": _POS_NUM,
                "lr_switch_epoch": {"type": "integer", "minimum": 0},
                "early_stop_patience": _POS_INT,
                "grad_clip": {"oneOf": [_POS_NUM, {"type": "null"}]},
                "iters_per_epoch": _POS_INT,
                "val_max_windows": _POS_INT,
                "checkpoint_every": {"type": "integer", "minimum": 0},
            },
        },
        "partition_seed": {"type": "integer", "minimum": 0},
        "ha_period": _POS_INT,
        "noise": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "fractions": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "ablation": {"enum": ["banks", "units"]},
        "unit_counts": {"type": "array", "items": _POS_INT, "minItems": 1},
        "windows_per_dataset": _POS_INT,
    },
}

DEFAULTS = {
    "seed": 0,
    "out": "uniflow_out",
    "protocol": "short",
    "partition_seed": 0,
    "ha_period": 24,
    "noise": [],
    "fractions": list(FEWSHOT_FRACTIONS),
    "ablation": "banks",
    "windows_per_dataset": 1,
}


class CliError(Exception):
    """A user-facing failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# ---------------------------------------------------------------------------
# configuration


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uniflow", description="Unified grid/graph flow forecasting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="seed (u64)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--protocol", choices=sorted(PROTOCOLS), help="task protocol")
        p.add_argument("--noise", type=float, help="history noise level as a fraction of the dataset mean")
        p.add_argument("--fraction", type=float, help="few-shot fraction of the target's training windows")
    return parser


def load_config(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config is not None:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError("config_missing", f"cannot read config {args.config}: {exc.strerror}") from exc
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError("config_parse", f"{args.config}: {exc}") from exc
        if isinstance(cfg, dict):
            cfg = _resolve_paths(cfg, Path(args.config).resolve().parent)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.protocol is not None:
        cfg["protocol"] = args.protocol
    if args.noise is not None:
        cfg["noise"] = [check_noise_level(args.noise)]
    if args.fraction is not None:
        cfg["fractions"] = [check_fraction(args.fraction)]
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError("config_invalid", f"{where}: {exc.message}") from exc
    return {**DEFAULTS, **cfg}


PATH_KEYS = ("out", "data_dir", "target", "checkpoint")


def _resolve_paths(cfg: dict, base: Path) -> dict:
    """Paths inside a config file are relative to the file's directory."""
    cfg = dict(cfg)
    for key in PATH_KEYS:
        if isinstance(cfg.get(key), str):
            cfg[key] = str(base / cfg[key])
    if isinstance(cfg.get("datasets"), list):
        cfg["datasets"] = [str(base / p) if isinstance(p, str) else p for p in cfg["datasets"]]
    return cfg


def task_of(cfg: dict) -> TaskSpec:
    if "task" in cfg:
        return TaskSpec(cfg["task"]["history_len"], cfg["task"]["horizon_len"])
    return PROTOCOLS[cfg["protocol"]]


def patch_of(cfg: dict) -> PatchConfig:
    return PatchConfig(**cfg.get("patch", {}))


def model_of(cfg: dict, patch: PatchConfig) -> ModelConfig:
    kw = {"d_model": patch.d_model, **cfg.get("model", {})}
    if kw["d_model"] != patch.d_model:
        raise CliError("config_invalid", "model.d_model must equal patch.d_model")
    return ModelConfig.from_dict(kw)


def train_of(cfg: dict) -> TrainConfig:
    kw = {k: v for k, v in cfg.get("train", {}).items() if k != "checkpoint_every"}
    return TrainConfig(seed=int(cfg["seed"]), **kw)


def _manifest(data_dir: Path) -> dict:
    path = data_dir / MANIFEST
    if not path.is_file():
        raise CliError("missing_path", f"no {MANIFEST} in {data_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def dataset_paths(cfg: dict) -> list[Path]:
    if "datasets" in cfg:
        paths = [Path(p) for p in cfg["datasets"]]
    elif "data_dir" in cfg:
        root = Path(cfg["data_dir"])
        paths = [root / name for name in _manifest(root)["train"]]
    else:
        raise CliError("config_invalid", "set 'datasets' or 'data_dir'")
    for p in paths:
        if not p.is_dir():
            raise CliError("missing_path", f"dataset directory {p} does not exist")
    return paths


def target_path(cfg: dict) -> Path:
    if "target" in cfg:
        p = Path(cfg["target"])
    elif "data_dir" in cfg:
        root = Path(cfg["data_dir"])
        p = root / _manifest(root)["target"]
    else:
        raise CliError("config_invalid", "set 'target' or 'data_dir'")
    if not p.is_dir():
        raise CliError("missing_path", f"dataset directory {p} does not exist")
    return p


def checkpoint_path(cfg: dict) -> Path:
    p = Path(cfg["checkpoint"]) if "checkpoint" in cfg else Path(cfg["out"]) / FINAL_CHECKPOINT
    if not p.is_file():
        raise CliError("missing_path", f"checkpoint {p} does not exist")
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    suite = gen_suite(int(cfg["seed"]), **cfg.get("gen", {}))
    for d in suite:
        save_dataset(d, out / d.name)
    names = [d.name for d in suite]
    _write_json(out / MANIFEST, {
        "seed": int(cfg["seed"]),
        "train": [n for n in names if not n.endswith(TARGET_MARKER)],
        "target": next(n for n in names if n.endswith(TARGET_MARKER)),
    })
    return out


def _load_prepared(paths, patch: PatchConfig, partition_seed: int):
    return [prepare(load_dataset(p), patch, partition_seed=partition_seed) for p in paths]


def _train_once(cfg: dict, model_cfg: ModelConfig, prepared, run_dir: Optional[Path]) -> tuple:
    patch, task, tcfg = patch_of(cfg), task_of(cfg), train_of(cfg)
    patch.check_task(task)
    model = build_model(patch, model_cfg, seed=int(cfg["seed"]))
    every = int(cfg.get("train", {}).get("checkpoint_every", 0))
    meta = {"seed": int(cfg["seed"]), "task": asdict(task), "trained_on": [d.name for d in prepared],
            "partition_seed": int(cfg["partition_seed"]), "train_config": tcfg.to_dict()}

    def on_epoch(epoch, m, val):
        if run_dir is not None and every and (epoch + 1) % every == 0:
            save_checkpoint(m, run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt", meta={**meta, "epoch": epoch + 1})

    result = train(model, prepared, task, tcfg, on_epoch=on_epoch)
    return model, result, meta


def cmd_train(cfg: dict) -> Path:
    patch = patch_of(cfg)
    model_cfg = model_of(cfg, patch)
    paths = dataset_paths(cfg)
    run_dir = Path(cfg["out"])
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = dict(cfg)
    snap["datasets"] = [str(p) for p in paths]
    snap.pop("data_dir", None)
    _write_json(run_dir / "config.json", snap)
    prepared = _load_prepared(paths, patch, int(cfg["partition_seed"]))
    model, result, meta = _train_once(cfg, model_cfg, prepared, run_dir)
    with open(run_dir / "loss.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "dataset", "loss"])
        for step, name, loss in result.losses:
            w.writerow([step, name, repr(float(loss))])
    _write_json(run_dir / "validation.json", {"best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
                                              "val_rmse": [float(v) for v in result.val_history]})
    save_checkpoint(model, run_dir / FINAL_CHECKPOINT, meta={**meta, "best_epoch": result.best_epoch})
    return run_dir


def _checkpoint_context(cfg: dict):
    path = checkpoint_path(cfg)
    model, meta = load_checkpoint(path)
    partition_seed = int(meta.get("partition_seed", cfg["partition_seed"]))
    return model, meta, partition_seed


def cmd_eval(cfg: dict) -> Path:
    out = Path(cfg["out"])
    model, meta, pseed = _checkpoint_context(cfg)
    task, seed = task_of(cfg), int(cfg["seed"])
    model.patch_cfg.check_task(task)
    prepared = _load_prepared(dataset_paths(cfg), model.patch_cfg, pseed)
    reports = [protocol_predict(model, d, task, seed=seed) for d in prepared]
    baselines = [protocol_baseline(d, task, int(cfg["ha_period"]), seed=seed) for d in prepared]
    stem = f"eval_{cfg['protocol'] if 'task' not in cfg else 'custom'}"
    write_reports(reports, out, stem)
    write_reports(baselines, out, stem + "_ha")
    levels = cfg["noise"]
    if levels:
        noisy = [noise_eval(model, d, check_noise_level(lv), task, seed=seed) for lv in levels for d in prepared]
        write_reports(noisy, out, stem + "_noise")
    return out


def cmd_ablate(cfg: dict) -> Path:
    out = Path(cfg["out"])
    patch, task, seed = patch_of(cfg), task_of(cfg), int(cfg["seed"])
    base = model_of(cfg, patch)
    if cfg["ablation"] == "banks":
        configs = bank_ablation_configs(base)
    else:
        configs = unit_count_configs(base, cfg.get("unit_counts", (64, 128, 256, 512, 1024)))
    prepared = _load_prepared(dataset_paths(cfg), patch, int(cfg["partition_seed"]))
    family = {label: (lambda mc=mc: _train_once(cfg, mc, prepared, None)[0]) for label, mc in configs.items()}
    reports = ablate(family, prepared, task, seed=seed)
    write_reports(reports, out, f"ablate_{cfg['ablation']}")
    return out


def cmd_shot(cfg: dict) -> Path:
    out = Path(cfg["out"])
    model, meta, pseed = _checkpoint_context(cfg)
    task, seed = task_of(cfg), int(cfg["seed"])
    model.patch_cfg.check_task(task)
    target = _load_prepared([target_path(cfg)], model.patch_cfg, pseed)[0]
    tcfg = train_of(cfg)
    fractions = [check_fraction(f) for f in cfg["fractions"]]
    reports = zero_few_shot(model, target, task, tcfg, meta.get("trained_on", []), fractions, seed=seed)
    write_reports(reports, out, "shot")
    return out


def cmd_inspect_memory(cfg: dict) -> Path:
    out = Path(cfg["out"])
    model, meta, pseed = _checkpoint_context(cfg)
    task = task_of(cfg)
    model.patch_cfg.check_task(task)
    prepared = _load_prepared(dataset_paths(cfg), model.patch_cfg, pseed)
    out.mkdir(parents=True, exist_ok=True)
    per = int(cfg["windows_per_dataset"])
    rows = []
    for d in prepared:
        ws = d.windows(task, "test")
        for i in np.linspace(0, len(ws) - 1, per).round().astype(int):
            rows.append((d.name, int(i), retrieval_signature(model, d, ws.windows[int(i)], task)))
    n_mem = model.model_cfg.n_mem
    header = ["dataset", "window"] + [f"{b}_{u}" for b in ("time", "freq", "time_spatial", "freq_spatial")
                                      for u in range(n_mem)]
    with open(out / "signatures.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name, i, sig in rows:
            w.writerow([name, i] + [repr(float(v)) for v in sig])
    with open(out / "cosines.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_a", "window_a", "dataset_b", "window_b", "cosine"])
        if not model.model_cfg.banks:
            return out  # nothing is retrieved, so there is nothing to compare
        for (na, ia, sa), (nb, ib, sb) in itertools.combinations(rows, 2):
            w.writerow([na, ia, nb, ib, repr(cosine(sa, sb))])
    return out


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "shot": cmd_shot,
    "inspect-memory": cmd_inspect_memory,
}


def apply_threads(env=os.environ) -> None:
    raw = env.get("UNIFLOW_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError("env_invalid", f"UNIFLOW_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        apply_threads()
        cfg = load_config(args)
        out = HANDLERS[command](cfg)
        print(json.dumps({"command": command, "status": "ok", "out": str(out)}))
        return 0
    except CliError as exc:
        err = {"error": exc.code, "message": str(exc)}
    except (ValueError, KeyError, TypeError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
    err["command"] = command
    print(json.dumps(err), file=sys.stderr)
    return 2 if err["error"] == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
