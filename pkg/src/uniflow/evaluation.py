"""Metrics, the History-Average baseline, and the experimental protocols."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .data import LONG_TERM, SHORT_TERM, TaskSpec
from .model import ModelConfig, UniFlow
from .stmra import BANK_LABELS, BANKS
from .synth import make_rng
from .training import (
    PreparedDataset,
    TrainConfig,
    finetune_fewshot,
    fold_channels,
    predict_normalized,
)

PROTOCOLS = {"short": SHORT_TERM, "long": LONG_TERM}
NOISE_LEVELS = (0.01, 0.05, 0.10)
UNIT_COUNTS = (64, 128, 256, 512, 1024)
FEWSHOT_FRACTIONS = (0.05, 0.10)


class ProvenanceError(ValueError):
    """The zero/few-shot target was part of the training corpus."""


# ---------------------------------------------------------------------------
# metrics


def _pair(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("metrics need at least one value")
    return pred, true


def mae(pred, true) -> float:
    p, t = _pair(pred, true)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, true) -> float:
    p, t = _pair(pred, true)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    protocol: str
    rmse: float
    mae: float
    horizon: int
    steps: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def report_from(pred, true, dataset: str, protocol: str, task: TaskSpec, seed: int) -> EvalReport:
    return EvalReport(dataset, protocol, rmse(pred, true), mae(pred, true), task.horizon_len,
                      int(np.asarray(pred).shape[0]), seed)


# ---------------------------------------------------------------------------
# History Average


def history_average(history: np.ndarray, horizon: int, period: int) -> np.ndarray:
    """Forecast each step as the mean of history values at the same phase of ``period``.

    ``history`` has time on axis 0.  When the history is shorter than one
    period, every step falls back to the plain history mean.
    """
    history = np.asarray(history, dtype=np.float64)
    H = history.shape[0]
    if H == 0:
        raise ValueError("history is empty")
    if period < 1:
        raise ValueError("period must be positive")
    out = np.empty((horizon,) + history.shape[1:])
    if H < period:
        out[:] = history.mean(axis=0)
        return out
    for p in range(horizon):
        out[p] = history[(H + p) % period::period].mean(axis=0)
    return out


def baseline_history_average(window: np.ndarray, task: TaskSpec, period: int) -> np.ndarray:
    """History-Average forecast of the horizon of one window (time on axis 0)."""
    return history_average(np.asarray(window)[: task.history_len], task.horizon_len, period)


def protocol_baseline(prepared: PreparedDataset, task: TaskSpec, period: int, seed: int = 0) -> EvalReport:
    ws = prepared.raw_windows(task, "test").windows
    H = task.history_len
    # vectorized over windows: windows axis 0, time axis 1
    hist = np.moveaxis(ws[:, :H], 1, 0)
    pred = np.moveaxis(history_average(hist, task.horizon_len, period), 0, 1)
    return report_from(pred, ws[:, H:], prepared.name, f"HA-{_task_label(task)}", task, seed)


def zeros_baseline(prepared: PreparedDataset, task: TaskSpec, seed: int = 0) -> EvalReport:
    ws = prepared.raw_windows(task, "test").windows
    true = ws[:, task.history_len:]
    return report_from(np.zeros_like(true), true, prepared.name, f"zeros-{_task_label(task)}", task, seed)


def _task_label(task: TaskSpec) -> str:
    return f"{task.history_len}->{task.horizon_len}"


# ---------------------------------------------------------------------------
# model protocols


def noise_std(prepared: PreparedDataset, level: float) -> float:
    """Noise standard deviation in data units: ``level`` times the dataset mean."""
    return level * prepared.dataset.meta.mean


def forecast(model: UniFlow, prepared: PreparedDataset, task: TaskSpec, split: str = "test",
             noise_level: float = 0.0, seed: int = 0, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Denormalized horizon predictions and ground truth for every window of ``split``.

    With ``noise_level > 0`` zero-mean Gaussian noise of std
    ``noise_level * dataset mean`` is added to the history inputs only.
    The standard-normal draw depends only on ``seed``, so sweeps over the
    level reuse the same noise direction.
    """
    norm_ws = prepared.windows(task, split).windows
    raw_ws = prepared.raw_windows(task, split).windows
    H = task.history_len
    inputs = np.array(norm_ws, dtype=np.float32)
    if noise_level:
        z = make_rng(seed).standard_normal(inputs[:, :H].shape)
        sigma = noise_std(prepared, noise_level) / prepared.normalizer.scale
        inputs[:, :H] = (inputs[:, :H] + sigma * z).astype(np.float32)
    # future inputs are never read by the model; blank them so that is evident
    inputs[:, H:] = 0.0
    pred = predict_normalized(model, prepared, inputs, task, batch_size)
    pred = prepared.normalizer.inverse_transform(pred[:, H:])
    return pred, np.asarray(raw_ws[:, H:], dtype=np.float64)


def protocol_predict(model: UniFlow, prepared: PreparedDataset, task: TaskSpec, seed: int = 0,
                     label: Optional[str] = None) -> EvalReport:
    pred, true = forecast(model, prepared, task, "test", seed=seed)
    return report_from(pred, true, prepared.name, label or f"UniFlow-{_task_label(task)}", task, seed)


def noise_eval(model: UniFlow, prepared: PreparedDataset, level: float, task: TaskSpec = SHORT_TERM,
               seed: int = 0) -> EvalReport:
    if not (level >= 0 and math.isfinite(level)):
        raise ValueError(f"invalid noise level {level}")
    pred, true = forecast(model, prepared, task, "test", noise_level=level, seed=seed)
    return report_from(pred, true, prepared.name, f"noise={level:g}", task, seed)


def bank_ablation_configs(base: ModelConfig) -> dict:
    """Full model, each single bank removed, and every bank removed."""
    out = {"full": base}
    for b in BANKS:
        out[f"w/o {BANK_LABELS[b]}"] = replace(base, banks=tuple(x for x in BANKS if x != b))
    out["w/o MRA"] = replace(base, banks=())
    return out


def unit_count_configs(base: ModelConfig, counts: Iterable[int] = UNIT_COUNTS) -> dict:
    return {f"units={n}": replace(base, n_mem=n) for n in counts}


def ablate(family: dict, datasets: Sequence[PreparedDataset], task: TaskSpec, seed: int = 0) -> list[EvalReport]:
    """One report per (configuration, dataset).

    ``family`` maps a configuration label to a trained model, or to a
    zero-argument callable producing one (trained on demand).
    """
    reports = []
    for label, entry in family.items():
        model = entry() if callable(entry) and not isinstance(entry, torch.nn.Module) else entry
        for d in datasets:
            reports.append(protocol_predict(model, d, task, seed=seed, label=label))
    return reports


def zero_few_shot(model: UniFlow, target: PreparedDataset, task: TaskSpec, cfg: TrainConfig,
                  trained_on: Iterable[str], fractions: Sequence[float] = FEWSHOT_FRACTIONS,
                  seed: int = 0) -> list[EvalReport]:
    trained_on = set(trained_on)
    if target.name in trained_on:
        raise ProvenanceError(f"target {target.name!r} appears in the training manifest")
    reports = [protocol_predict(model, target, task, seed=seed, label="zero-shot")]
    for frac in fractions:
        tuned = finetune_fewshot(model, target, task, frac, cfg).model
        reports.append(protocol_predict(tuned, target, task, seed=seed, label=f"few-shot={frac:g}"))
    return reports


# ---------------------------------------------------------------------------
# retrieval case study


def retrieval_signature(model: UniFlow, prepared: PreparedDataset, window: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Signature of one normalized (T', N) or (T', N, C) window; channels are averaged."""
    w = np.array(window, dtype=np.float32)
    if w.ndim == 2:
        w = w[..., None]
    model.eval()
    x = torch.as_tensor(fold_channels(w[None]), dtype=next(model.parameters()).dtype)
    sig = model.retrieval_signature(x, prepared.ctx, task)
    return sig.mean(dim=0).double().numpy()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero-norm signature")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def case_study(model: UniFlow, prepared: PreparedDataset, window_a, window_b, task: TaskSpec) -> float:
    return cosine(retrieval_signature(model, prepared, window_a, task),
                  retrieval_signature(model, prepared, window_b, task))


# ---------------------------------------------------------------------------
# report files


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def write_reports(reports: Sequence[EvalReport], out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fields = list(EvalReport.__dataclass_fields__)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in reports:
            w.writerow([_fmt(getattr(r, f)) for f in fields])
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path
