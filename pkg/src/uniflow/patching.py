"""Multi-view spatio-temporal patching: grid and graph windows to one L x D sequence.

Sequences are ordered temporal block first, then spatial unit (row-major
scan line for grids, subgraph id for graphs), so the history patches of a
window always form a prefix of the sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import GRAPH, GRID, FlowDataset, TaskSpec
from .partition import Partition


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    p_t: int = 4
    p_s: int = 2
    d_model: int = 64
    num_subgraphs: int = 16

    def __post_init__(self):
        if self.p_t < 1 or self.p_s < 1:
            raise PatchError("patch sizes must be positive")
        if self.num_subgraphs < 1:
            raise PatchError("num_subgraphs must be >= 1")
        if self.d_model < 8:
            raise PatchError("d_model must be >= 8")

    def check_task(self, task: TaskSpec) -> None:
        if task.history_len % self.p_t or task.horizon_len % self.p_t:
            raise PatchError(
                f"p_t={self.p_t} must divide history ({task.history_len}) and horizon ({task.horizon_len})"
            )


@dataclass(frozen=True, eq=False)
class PatchLayout:
    n_blocks: int
    n_units: int
    n_hist_blocks: int
    block: np.ndarray = field(repr=False)
    unit: np.ndarray = field(repr=False)
    is_history: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n_blocks: int, n_units: int, n_hist_blocks: int) -> "PatchLayout":
        if not 0 < n_hist_blocks <= n_blocks:
            raise PatchError("history must cover between one and all temporal blocks")
        block = np.repeat(np.arange(n_blocks), n_units)
        unit = np.tile(np.arange(n_units), n_blocks)
        return cls(n_blocks, n_units, n_hist_blocks, block, unit, block < n_hist_blocks)

    @property
    def length(self) -> int:
        return self.n_blocks * self.n_units

    @property
    def history_len(self) -> int:
        return self.n_hist_blocks * self.n_units

    @property
    def history_positions(self) -> np.ndarray:
        return np.flatnonzero(self.is_history)

    @property
    def future_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.is_history)

    def index(self, block: int, unit: int) -> int:
        return block * self.n_units + unit


@dataclass(eq=False)
class PatchSequence:
    embeddings: torch.Tensor  # (..., L, D)
    layout: PatchLayout
    skip_features: Optional[torch.Tensor] = None  # (..., n_blocks, N, D), graphs only


@dataclass(eq=False)
class SpatialContext:
    """What the model needs to know about a dataset's spatial layout."""

    kind: str
    n_nodes: int
    height: int = 0
    width: int = 0
    assignment: Optional[np.ndarray] = None
    n_parts: int = 0
    _pool: Optional[torch.Tensor] = field(default=None, repr=False)

    @classmethod
    def for_dataset(cls, dataset: FlowDataset, partition: Optional[Partition] = None) -> "SpatialContext":
        if dataset.kind == GRID:
            return cls(GRID, dataset.N, dataset.grid_spec.height, dataset.grid_spec.width)
        if partition is None:
            raise PatchError(f"graph dataset {dataset.name!r} needs a partition")
        if partition.assignment.shape != (dataset.N,):
            raise PatchError("partition does not match the topology")
        return cls(GRAPH, dataset.N, assignment=np.asarray(partition.assignment), n_parts=partition.k)

    def n_units(self, cfg: PatchConfig) -> int:
        if self.kind == GRID:
            if self.height % cfg.p_s or self.width % cfg.p_s:
                raise PatchError(f"p_s={cfg.p_s} must divide grid {self.height}x{self.width}")
            return (self.height // cfg.p_s) * (self.width // cfg.p_s)
        return self.n_parts

    def layout(self, task: TaskSpec, cfg: PatchConfig) -> PatchLayout:
        cfg.check_task(task)
        return PatchLayout.build(task.window_len // cfg.p_t, self.n_units(cfg), task.history_len // cfg.p_t)

    def pool(self, like: torch.Tensor) -> torch.Tensor:
        """``n_parts x N`` row-normalized membership (averaging) matrix."""
        if self._pool is None or self._pool.dtype != like.dtype:
            m = np.zeros((self.n_parts, self.n_nodes))
            m[self.assignment, np.arange(self.n_nodes)] = 1.0
            m /= m.sum(axis=1, keepdims=True)
            self._pool = torch.as_tensor(m, dtype=like.dtype)
        return self._pool


# ---------------------------------------------------------------------------
# encoders


class GridPatcher(nn.Module):
    """3-D convolution with kernel = stride = (p_t, p_s, p_s)."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        k = (cfg.p_t, cfg.p_s, cfg.p_s)
        self.cfg = cfg
        self.conv = nn.Conv3d(1, cfg.d_model, kernel_size=k, stride=k)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: (B, T', H, W) -> (B, L, D)."""
        B, T, H, W = x.shape
        p_t, p_s = self.cfg.p_t, self.cfg.p_s
        if T % p_t or H % p_s or W % p_s:
            raise PatchError(f"window {T}x{H}x{W} not divisible by patch ({p_t}, {p_s}, {p_s})")
        y = self.conv(x.unsqueeze(1))  # B, D, nb, Hs, Ws
        return y.permute(0, 2, 3, 4, 1).reshape(B, -1, self.cfg.d_model)


class GraphPatcher(nn.Module):
    """Per-node temporal 1-D convolution, then mean pooling within each subgraph."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(1, cfg.d_model, kernel_size=cfg.p_t, stride=cfg.p_t)

    def node_features(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: (B, T', N) -> (B, n_blocks, N, D)."""
        B, T, N = x.shape
        if T % self.cfg.p_t:
            raise PatchError(f"window length {T} not divisible by p_t={self.cfg.p_t}")
        y = self.conv(x.transpose(1, 2).reshape(B * N, 1, T))  # B*N, D, nb
        return y.reshape(B, N, self.cfg.d_model, -1).permute(0, 3, 1, 2)

    def forward(self, x: torch.Tensor, pool: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats = self.node_features(x)
        sub = torch.einsum("sn,btnd->btsd", pool, feats)
        B = x.shape[0]
        return sub.reshape(B, -1, self.cfg.d_model), feats


def patch_grid(window: torch.Tensor, cfg: PatchConfig, patcher: GridPatcher, task: TaskSpec) -> PatchSequence:
    """Patch a (T', H, W) or (B, T', H, W) normalized grid window."""
    squeeze = window.dim() == 3
    x = window.unsqueeze(0) if squeeze else window
    _, T, H, W = x.shape
    if T != task.window_len:
        raise PatchError(f"window has {T} steps, task expects {task.window_len}")
    ctx = SpatialContext(GRID, H * W, H, W)
    layout = ctx.layout(task, cfg)
    emb = patcher(x)
    return PatchSequence(emb[0] if squeeze else emb, layout)


def patch_graph(window: torch.Tensor, partition: Partition, cfg: PatchConfig, patcher: GraphPatcher,
                task: TaskSpec) -> PatchSequence:
    """Patch a (T', N) or (B, T', N) normalized graph window."""
    squeeze = window.dim() == 2
    x = window.unsqueeze(0) if squeeze else window
    _, T, N = x.shape
    if partition.assignment.shape != (N,):
        raise PatchError("partition does not match the window's node count")
    if partition.k != cfg.num_subgraphs:
        raise PatchError(f"partition has {partition.k} parts, config wants {cfg.num_subgraphs}")
    if T != task.window_len:
        raise PatchError(f"window has {T} steps, task expects {task.window_len}")
    ctx = SpatialContext(GRAPH, N, assignment=partition.assignment, n_parts=partition.k)
    layout = ctx.layout(task, cfg)
    emb, feats = patcher(x, ctx.pool(x))
    if squeeze:
        return PatchSequence(emb[0], layout, feats[0])
    return PatchSequence(emb, layout, feats)


def mask_history(seq: PatchSequence) -> tuple[torch.Tensor, np.ndarray]:
    """History rows (a sequence prefix) and the positions of the masked future rows."""
    n = seq.layout.history_len
    return seq.embeddings[..., :n, :], seq.layout.future_positions


# ---------------------------------------------------------------------------
# output heads


class GridHead(nn.Module):
    """Linear map D -> p_t * p_s * p_s per patch, scattered back by the layout."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.d_model, cfg.p_t * cfg.p_s * cfg.p_s)

    def forward(self, y: torch.Tensor, layout: PatchLayout, height: int, width: int) -> torch.Tensor:
        return unpatch_grid(self.proj(y), layout, self.cfg, height, width)


def unpatch_grid(patch_values: torch.Tensor, layout: PatchLayout, cfg: PatchConfig, height: int,
                 width: int) -> torch.Tensor:
    """Inverse of the grid scan-line ordering: (B, L, p_t*p_s*p_s) -> (B, T', H, W)."""
    B, L, _ = patch_values.shape
    p_t, p_s = cfg.p_t, cfg.p_s
    hs, ws = height // p_s, width // p_s
    if L != layout.length or hs * ws != layout.n_units:
        raise PatchError("patch values do not match the layout")
    v = patch_values.reshape(B, layout.n_blocks, hs, ws, p_t, p_s, p_s)
    v = v.permute(0, 1, 4, 2, 5, 3, 6)  # B, nb, p_t, hs, p_s, ws, p_s
    return v.reshape(B, layout.n_blocks * p_t, height, width)


class GraphHead(nn.Module):
    """Subgraph token -> p_t mean prediction, plus a per-node correction from its skip feature."""

    def __init__(self, cfg: PatchConfig, hidden: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        hidden = hidden or cfg.d_model
        self.proj = nn.Linear(cfg.d_model, cfg.p_t)
        self.correction = nn.Sequential(
            nn.Linear(cfg.d_model, hidden),
            nn.GELU(),
            nn.Linear(hidden, cfg.p_t),
        )
        nn.init.zeros_(self.correction[2].weight)
        nn.init.zeros_(self.correction[2].bias)

    def forward(self, y: torch.Tensor, skip: torch.Tensor, assignment: np.ndarray,
                layout: PatchLayout) -> torch.Tensor:
        return unpatch_graph(self.proj(y), self.correction(skip), assignment, layout, self.cfg)


def unpatch_graph(sub_values: torch.Tensor, node_corr: torch.Tensor, assignment, layout: PatchLayout,
                  cfg: PatchConfig) -> torch.Tensor:
    """Broadcast subgraph predictions to member nodes and add node corrections.

    ``sub_values``: (B, L, p_t); ``node_corr``: (B, n_blocks, N, p_t) -> (B, T', N).
    """
    B, L, p_t = sub_values.shape
    if L != layout.length:
        raise PatchError("decoder output does not match the layout")
    idx = torch.as_tensor(np.asarray(assignment), dtype=torch.long)
    sub = sub_values.reshape(B, layout.n_blocks, layout.n_units, p_t)
    per_node = sub[:, :, idx, :] + node_corr  # B, nb, N, p_t
    return per_node.permute(0, 1, 3, 2).reshape(B, layout.n_blocks * p_t, -1)
