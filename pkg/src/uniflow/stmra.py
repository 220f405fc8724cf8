"""Spatio-temporal memory retrieval augmentation.

Four learnable key/value memories (time, frequency, time-spatial,
frequency-spatial) are queried with pattern embeddings derived from the
history patches; the retrieved prompts are added to the decoder input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .fft import rfft_magnitude
from .patching import PatchLayout
from .transformer import AttentionBlock

BANKS = ("time", "freq", "time_spatial", "freq_spatial")
BANK_LABELS = {"time": "T", "freq": "F", "time_spatial": "S_T", "freq_spatial": "S_F"}


@dataclass
class QueryBundle:
    E_t: torch.Tensor
    E_f: torch.Tensor
    E_st: torch.Tensor
    E_sf: torch.Tensor

    def for_bank(self, kind: str) -> torch.Tensor:
        return {"time": self.E_t, "freq": self.E_f, "time_spatial": self.E_st, "freq_spatial": self.E_sf}[kind]


@dataclass
class AdaptiveAdjacency:
    A_t: torch.Tensor
    A_f: torch.Tensor


@dataclass
class PromptBundle:
    prompts: dict  # bank kind -> (B, L_h, D)
    weights: dict  # bank kind -> (B, L_h, N_mem)

    def total(self) -> Optional[torch.Tensor]:
        vals = list(self.prompts.values())
        if not vals:
            return None
        out = vals[0]
        for v in vals[1:]:
            out = out + v
        return out


def retrieve(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-over-keys read: ``alpha = softmax(Q K^T)``, ``P = alpha V``."""
    if query.shape[-1] != keys.shape[-1] or keys.shape != values.shape:
        raise ValueError(f"query {tuple(query.shape)} incompatible with memory {tuple(keys.shape)}")
    alpha = torch.softmax(query @ keys.transpose(-2, -1), dim=-1)
    return alpha @ values, alpha


def adaptive_adjacency(E: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(ReLU(E E^T))`` over patch positions."""
    return torch.softmax(F.relu(E @ E.transpose(-2, -1)), dim=-1)


class MemoryBank(nn.Module):
    def __init__(self, kind: str, n_mem: int, d_model: int):
        super().__init__()
        if kind not in BANKS:
            raise ValueError(f"unknown memory kind {kind!r}")
        self.kind = kind
        self.keys = nn.Parameter(torch.randn(n_mem, d_model) / math.sqrt(d_model))
        self.values = nn.Parameter(torch.randn(n_mem, d_model) / math.sqrt(d_model))

    def forward(self, query: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return retrieve(query, self.keys, self.values)


class QueryFormulator(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.time_attn = AttentionBlock(d_model, heads)
        self.freq_proj = nn.Linear(d_model, d_model)
        self.gcn_t = nn.Linear(d_model, d_model, bias=False)
        self.gcn_f = nn.Linear(d_model, d_model, bias=False)

    def frequency_patterns(self, s_h: torch.Tensor, layout: PatchLayout) -> torch.Tensor:
        """Magnitude spectrum over temporal blocks, per spatial unit and channel."""
        B, Lh, D = s_h.shape
        nb, nu = layout.n_hist_blocks, layout.n_units
        grid = s_h.reshape(B, nb, nu, D)
        mag = rfft_magnitude(grid, dim=1, length=nb)
        return self.freq_proj(mag).reshape(B, Lh, D)

    def forward(self, s_h: torch.Tensor, layout: PatchLayout) -> tuple[QueryBundle, AdaptiveAdjacency]:
        if s_h.shape[-2] == 0:
            raise ValueError("query formulation needs at least one history patch")
        E_t = self.time_attn(s_h)
        E_f = self.frequency_patterns(s_h, layout)
        A_t = adaptive_adjacency(E_t)
        A_f = adaptive_adjacency(E_f)
        E_st = F.relu(self.gcn_t(A_t @ E_t))
        E_sf = F.relu(self.gcn_f(A_f @ E_f))
        return QueryBundle(E_t, E_f, E_st, E_sf), AdaptiveAdjacency(A_t, A_f)


class STMRA(nn.Module):
    def __init__(self, d_model: int, heads: int, n_mem: int, banks: Iterable[str] = BANKS):
        super().__init__()
        self.n_mem = n_mem
        self.enabled = tuple(b for b in BANKS if b in set(banks))
        self.queries = QueryFormulator(d_model, heads)
        # all four banks always exist so checkpoints share one manifest
        self.banks = nn.ModuleDict({k: MemoryBank(k, n_mem, d_model) for k in BANKS})

    def forward(self, s_h: torch.Tensor, layout: PatchLayout) -> PromptBundle:
        if not self.enabled:
            return PromptBundle({}, {})
        q, _ = self.queries(s_h, layout)
        prompts, weights = {}, {}
        for kind in self.enabled:
            prompts[kind], weights[kind] = self.banks[kind](q.for_bank(kind))
        return PromptBundle(prompts, weights)


def augment(z_d: torch.Tensor, prompts: Optional[PromptBundle], layout: PatchLayout) -> torch.Tensor:
    """Add summed prompts at history rows and their history-mean at future rows."""
    if prompts is None:
        return z_d
    total = prompts.total()
    if total is None:
        return z_d
    n = layout.history_len
    if total.shape[-2] != n:
        raise ValueError("prompts are not aligned with the history positions")
    fut = total.mean(dim=-2, keepdim=True).expand(*total.shape[:-2], layout.length - n, total.shape[-1])
    return z_d + torch.cat([total, fut], dim=-2)


def signature(prompts: PromptBundle, n_mem: int) -> torch.Tensor:
    """Per-bank retrieval weights averaged over history rows, concatenated (B, 4*N_mem).

    Disabled banks contribute zeros.
    """
    parts = []
    some = next(iter(prompts.weights.values()), None)
    for kind in BANKS:
        w = prompts.weights.get(kind)
        if w is None:
            B = some.shape[0] if some is not None else 1
            dtype = some.dtype if some is not None else torch.float32
            parts.append(torch.zeros(B, n_mem, dtype=dtype))
        else:
            parts.append(w.mean(dim=-2))
    return torch.cat(parts, dim=-1)
