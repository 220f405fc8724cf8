"""Masked encoder-decoder transformer over unified patch sequences."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .data import GRAPH, GRID, TaskSpec
from .patching import (
    GraphHead,
    GraphPatcher,
    GridHead,
    GridPatcher,
    PatchConfig,
    PatchLayout,
    SpatialContext,
)
from .stmra import BANKS, STMRA, PromptBundle, augment, signature
from .transformer import TransformerBlock

KIND_INDEX = {GRID: 0, GRAPH: 1}


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 4
    dec_layers: int = 4
    d_model: int = 256
    heads: int = 8
    ff_mult: int = 4
    dropout: float = 0.1
    n_mem: int = 512
    banks: tuple = BANKS
    max_blocks: int = 64
    max_units: int = 256

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        unknown = set(self.banks) - set(BANKS)
        if unknown:
            raise ValueError(f"unknown memory banks {sorted(unknown)}")
        object.__setattr__(self, "banks", tuple(b for b in BANKS if b in set(self.banks)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["banks"] = list(self.banks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["banks"] = tuple(d.get("banks", BANKS))
        return cls(**d)


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass (for inspection and tests)."""

    layout: PatchLayout
    s: torch.Tensor
    z_e: torch.Tensor
    z_d: torch.Tensor
    y: torch.Tensor
    prompts: Optional[PromptBundle]


class UniFlow(nn.Module):
    def __init__(self, patch_cfg: PatchConfig, model_cfg: ModelConfig):
        super().__init__()
        if patch_cfg.d_model != model_cfg.d_model:
            raise ValueError("patch and model configs disagree on d_model")
        self.patch_cfg = patch_cfg
        self.model_cfg = model_cfg
        D = model_cfg.d_model
        self.grid_patcher = GridPatcher(patch_cfg)
        self.graph_patcher = GraphPatcher(patch_cfg)
        self.block_pos = nn.Embedding(model_cfg.max_blocks, D)
        self.unit_pos = nn.Embedding(model_cfg.max_units, D)
        self.kind_emb = nn.Embedding(len(KIND_INDEX), D)
        for emb in (self.block_pos, self.unit_pos, self.kind_emb):
            nn.init.normal_(emb.weight, std=0.02)
        self.mask_token = nn.Parameter(torch.zeros(D))
        nn.init.normal_(self.mask_token, std=0.02)
        blk = lambda: TransformerBlock(D, model_cfg.heads, model_cfg.ff_mult, model_cfg.dropout)
        self.encoder = nn.ModuleList([blk() for _ in range(model_cfg.enc_layers)])
        self.enc_norm = nn.LayerNorm(D)
        self.decoder = nn.ModuleList([blk() for _ in range(model_cfg.dec_layers)])
        self.out_norm = nn.LayerNorm(D)
        self.stmra = STMRA(D, model_cfg.heads, model_cfg.n_mem, model_cfg.banks)
        self.grid_head = GridHead(patch_cfg)
        self.graph_head = GraphHead(patch_cfg)

    # -- pieces ------------------------------------------------------------

    def positional(self, layout: PatchLayout, kind: str) -> torch.Tensor:
        if layout.n_blocks > self.model_cfg.max_blocks:
            raise ValueError(f"{layout.n_blocks} temporal blocks exceed max_blocks={self.model_cfg.max_blocks}")
        if layout.n_units > self.model_cfg.max_units:
            raise ValueError(f"{layout.n_units} spatial units exceed max_units={self.model_cfg.max_units}")
        b = torch.as_tensor(layout.block, dtype=torch.long)
        u = torch.as_tensor(layout.unit, dtype=torch.long)
        return self.block_pos(b) + self.unit_pos(u) + self.kind_emb.weight[KIND_INDEX[kind]]

    def encode(self, s_h: torch.Tensor) -> torch.Tensor:
        if s_h.shape[-2] == 0:
            raise ValueError("encoder needs at least one history patch")
        z = s_h
        for block in self.encoder:
            z = block(z)
        return self.enc_norm(z)

    def assemble_decoder_input(self, z_e: torch.Tensor, pos: torch.Tensor, layout: PatchLayout,
                               prompts: Optional[PromptBundle] = None) -> torch.Tensor:
        n = layout.history_len
        if z_e.shape[-2] != n:
            raise ValueError(f"encoder output has {z_e.shape[-2]} rows, layout expects {n}")
        fut = self.mask_token + pos[n:]
        fut = fut.expand(*z_e.shape[:-2], *fut.shape)
        z_d = torch.cat([z_e, fut], dim=-2)
        return augment(z_d, prompts, layout)

    def decode(self, z_d: torch.Tensor) -> torch.Tensor:
        y = z_d
        for block in self.decoder:
            y = block(y)
        return y

    def patch(self, x: torch.Tensor, ctx: SpatialContext):
        if ctx.kind == GRID:
            B, T, _ = x.shape
            return self.grid_patcher(x.reshape(B, T, ctx.height, ctx.width)), None
        return self.graph_patcher(x, ctx.pool(x))

    # -- full pass ---------------------------------------------------------

    def forward(self, x: torch.Tensor, ctx: SpatialContext, task: TaskSpec, trace: bool = False):
        """Predict every step of a (B, T', N) normalized window from its history.

        Timesteps after ``task.history_len`` are never read except through
        patches that are discarded by the history mask.
        """
        if x.dim() != 3 or x.shape[1] != task.window_len or x.shape[2] != ctx.n_nodes:
            raise ValueError(f"expected window (B, {task.window_len}, {ctx.n_nodes}), got {tuple(x.shape)}")
        layout = ctx.layout(task, self.patch_cfg)
        s, skip = self.patch(x, ctx)
        pos = self.positional(layout, ctx.kind)
        s = s + pos
        n = layout.history_len
        s_h = s[:, :n]
        z_e = self.encode(s_h)
        prompts = self.stmra(s_h, layout) if self.stmra.enabled else None
        z_d = self.assemble_decoder_input(z_e, pos, layout, prompts)
        y = self.out_norm(self.decode(z_d))
        if ctx.kind == GRID:
            out = self.grid_head(y, layout, ctx.height, ctx.width).reshape(x.shape[0], -1, ctx.n_nodes)
        else:
            # future blocks reuse the last history block's node features
            hb = layout.n_hist_blocks
            last = skip[:, hb - 1:hb].expand(-1, layout.n_blocks - hb, -1, -1)
            skip = torch.cat([skip[:, :hb], last], dim=1)
            out = self.graph_head(y, skip, ctx.assignment, layout)
        if trace:
            return out, ForwardTrace(layout, s, z_e, z_d, y, prompts)
        return out

    @torch.no_grad()
    def retrieval_signature(self, x: torch.Tensor, ctx: SpatialContext, task: TaskSpec) -> torch.Tensor:
        """Concatenated per-bank retrieval weights, averaged over history patches: (B, 4*N_mem)."""
        layout = ctx.layout(task, self.patch_cfg)
        s, _ = self.patch(x, ctx)
        s = s + self.positional(layout, ctx.kind)
        prompts = self.stmra(s[:, : layout.history_len], layout)
        return signature(prompts, self.model_cfg.n_mem)

    def attention_modules(self):
        return [m for m in self.modules() if m.__class__.__name__ == "MultiHeadAttention"]
