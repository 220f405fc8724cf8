"""Joint multi-dataset training: horizon MSE, Adam, per-dataset batch sizing, early stopping."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import FlowDataset, Normalizer, TaskSpec, WindowSet, normalize, split_622, window_samples
from .model import ModelConfig, UniFlow
from .partition import Partition, cached_partition
from .patching import PatchConfig, SpatialContext

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    lr_initial: float = 5e-4
    lr_late: float = 5e-5
    lr_switch_epoch: int = 150
    early_stop_patience: int = 15
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    iters_per_epoch: int = 100
    val_max_windows: int = 64
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr_initial > self.lr_late > 0:
            raise ValueError("need lr_initial > lr_late > 0")
        if self.max_epochs < 0 or self.iters_per_epoch < 1:
            raise ValueError("max_epochs must be >= 0 and iters_per_epoch >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# ---------------------------------------------------------------------------
# data preparation


@dataclass(eq=False)
class PreparedDataset:
    """A dataset normalized on its train split, with splits and spatial context."""

    dataset: FlowDataset
    values: np.ndarray  # normalized float32, T x N x C
    normalizer: Normalizer
    splits: tuple
    ctx: SpatialContext
    partition: Optional[Partition] = None

    @property
    def name(self) -> str:
        return self.dataset.name

    @property
    def kind(self) -> str:
        return self.dataset.kind

    def windows(self, task: TaskSpec, split: str = "train") -> WindowSet:
        rng = self.splits[("train", "val", "test").index(split)]
        return WindowSet(self.values, task, rng)

    def raw_windows(self, task: TaskSpec, split: str = "test") -> WindowSet:
        rng = self.splits[("train", "val", "test").index(split)]
        return window_samples(self.dataset, task, rng)


def prepare(dataset: FlowDataset, patch_cfg: PatchConfig, partition_seed: int = 0,
            cache_dir=None) -> PreparedDataset:
    splits = split_622(dataset)
    normed, norm = normalize(dataset, fit_range=splits[0])
    partition = None
    if dataset.kind == "graph":
        partition = cached_partition(dataset.topology, patch_cfg.num_subgraphs, cache_dir, seed=partition_seed)
    ctx = SpatialContext.for_dataset(dataset, partition)
    ctx.n_units(patch_cfg)  # validates grid divisibility early
    return PreparedDataset(dataset, normed.values.astype(np.float32), norm, splits, ctx, partition)


# ---------------------------------------------------------------------------
# loss and batching


def horizon_mse(pred, target, task: TaskSpec):
    """Mean squared error over the horizon steps only (axis 1 is time)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    h = task.history_len
    d = pred[:, h:] - target[:, h:]
    return (d * d).mean()


@dataclass(frozen=True)
class BatchPlan:
    K: int
    batch_sizes: dict
    iterations: dict


def make_batch_plan(window_counts: dict, K: int) -> BatchPlan:
    """Nominal batch ``B_d = max(1, round(N_d / K))``.

    Each epoch splits a dataset's windows into ``min(K, N_d)`` near-equal
    batches, so iteration counts match ``K`` exactly whenever ``N_d >= K``.
    """
    if not window_counts:
        raise ValueError("batch plan needs at least one dataset")
    if K < 1:
        raise ValueError("K must be >= 1")
    sizes = {name: max(1, int(round(n / K))) for name, n in window_counts.items()}
    iters = {name: min(K, n) for name, n in window_counts.items()}
    return BatchPlan(K, sizes, iters)


def fold_channels(batch: np.ndarray) -> np.ndarray:
    """(B, T', N, C) -> (B*C, T', N): channels become independent samples."""
    B, T, N, C = batch.shape
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2).reshape(B * C, T, N))


def unfold_channels(x: np.ndarray, C: int) -> np.ndarray:
    BC, T, N = x.shape
    return x.reshape(BC // C, C, T, N).transpose(0, 2, 3, 1)


@torch.no_grad()
def predict_normalized(model: UniFlow, prepared: PreparedDataset, windows: np.ndarray, task: TaskSpec,
                       batch_size: int = 64) -> np.ndarray:
    """Inference-mode predictions for normalized (B, T', N, C) windows."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    C = windows.shape[-1]
    outs = []
    for i in range(0, len(windows), batch_size):
        x = torch.as_tensor(fold_channels(windows[i:i + batch_size]), dtype=dtype)
        outs.append(unfold_channels(model(x, prepared.ctx, task).numpy(), C))
    model.train(was_training)
    return np.concatenate(outs, axis=0)


def _eval_indices(n: int, limit: int) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def validation_rmse(model: UniFlow, datasets: Sequence[PreparedDataset], task: TaskSpec,
                    limit: int) -> float:
    """Mean over datasets of normalized horizon RMSE on (evenly subsampled) validation windows."""
    scores = []
    for d in datasets:
        ws = d.windows(task, "val")
        w = ws.batch(_eval_indices(len(ws), limit))
        pred = predict_normalized(model, d, w, task)
        h = task.history_len
        scores.append(float(np.sqrt(np.mean((pred[:, h:] - w[:, h:]) ** 2))))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: UniFlow
    losses: list = field(default_factory=list)  # (step, dataset, loss)
    val_history: list = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0


def build_model(patch_cfg: PatchConfig, model_cfg: ModelConfig, seed: int = 0) -> UniFlow:
    torch.manual_seed(seed)
    return UniFlow(patch_cfg, model_cfg)


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr_initial if epoch < cfg.lr_switch_epoch else cfg.lr_late


def train(model: UniFlow, datasets: Sequence[PreparedDataset], task: TaskSpec, cfg: TrainConfig,
          window_limits: Optional[dict] = None, early_stopping: bool = True,
          on_epoch: Optional[Callable[[int, UniFlow, float], None]] = None) -> TrainResult:
    """Train ``model`` in place on all ``datasets`` jointly.

    Every epoch covers each dataset's training windows once, in batches
    from the batch plan; the order of (dataset, batch) steps is shuffled
    so each step draws its dataset at random.
    """
    if not datasets:
        raise ValueError("train needs at least one dataset")
    result = TrainResult(model)
    if cfg.max_epochs == 0:
        return result
    window_limits = window_limits or {}
    train_sets = {d.name: d.windows(task, "train") for d in datasets}
    counts = {name: min(len(ws), window_limits.get(name, len(ws))) for name, ws in train_sets.items()}
    plan = make_batch_plan(counts, cfg.iters_per_epoch)
    by_name = {d.name: d for d in datasets}

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial, betas=cfg.betas, eps=cfg.eps)
    best_val, best_state, bad_epochs = math.inf, None, 0
    step = 0
    for epoch in range(cfg.max_epochs):
        for group in opt.param_groups:
            group["lr"] = lr_for_epoch(cfg, epoch)
        schedule = []
        for name in sorted(counts):
            idx = rng.permutation(counts[name])
            schedule += [(name, chunk) for chunk in np.array_split(idx, plan.iterations[name])]
        model.train()
        for j in rng.permutation(len(schedule)):
            name, chunk = schedule[j]
            d = by_name[name]
            x = torch.as_tensor(fold_channels(train_sets[name].batch(np.sort(chunk))), dtype=dtype)
            loss = horizon_mse(model(x, d.ctx, task), x, task)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at step {step} (epoch {epoch}, dataset {name!r}, "
                    f"lr {opt.param_groups[0]['lr']:g}); last losses "
                    f"{[round(r[2], 6) for r in result.losses[-5:]]}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            result.losses.append((step, name, value))
            step += 1
        result.epochs_run = epoch + 1
        if not early_stopping:
            if on_epoch:
                on_epoch(epoch, model, float("nan"))
            continue
        val = validation_rmse(model, datasets, task, cfg.val_max_windows)
        result.val_history.append(val)
        log.info("epoch %d val_rmse %.6f", epoch, val)
        if on_epoch:
            on_epoch(epoch, model, val)
        if val < best_val:
            best_val, bad_epochs, result.best_epoch = val, 0, epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.early_stop_patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def finetune_fewshot(model: UniFlow, target: PreparedDataset, task: TaskSpec, fraction: float,
                     cfg: TrainConfig) -> TrainResult:
    """Fine-tune a copy of ``model`` on the first ``ceil(fraction * N)`` training windows of ``target``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n_total = len(target.windows(task, "train"))
    n_used = fewshot_window_count(n_total, fraction)
    tuned = copy.deepcopy(model)
    return train(tuned, [target], task, cfg, window_limits={target.name: n_used}, early_stopping=False)


def fewshot_window_count(n_windows: int, fraction: float) -> int:
    # round away float noise before the ceiling (0.05 * 400 must give 20, not 21)
    return max(1, int(math.ceil(round(fraction * n_windows, 9))))
