"""Tiny fixtures shared by the unit and acceptance tests."""

import numpy as np
import torch

from uniflow.data import GraphTopology, TaskSpec
from uniflow.model import ModelConfig, UniFlow
from uniflow.partition import partition_kway
from uniflow.patching import PatchConfig, SpatialContext

TINY_TASK = TaskSpec(8, 4)
TINY_PATCH = PatchConfig(p_t=4, p_s=2, d_model=8, num_subgraphs=2)
TINY_MODEL = ModelConfig(enc_layers=1, dec_layers=1, d_model=8, heads=2, ff_mult=2, dropout=0.0, n_mem=8,
                         max_blocks=8, max_units=8)


def tiny_model(seed=0, dtype=torch.float64, model_cfg=TINY_MODEL, patch_cfg=TINY_PATCH, scramble=True):
    """Tiny model; ``scramble`` redraws every parameter so no path is dead at init."""
    torch.manual_seed(seed)
    m = UniFlow(patch_cfg, model_cfg).to(dtype)
    if scramble:
        with torch.no_grad():
            for p in m.parameters():
                p.normal_(0.0, 0.4)
    return m.eval()


def grid_ctx(h=4, w=4):
    return SpatialContext("grid", h * w, h, w)


def graph_ctx(n=6, k=2, seed=0):
    edges = [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)]
    topo = GraphTopology.from_edges(n, edges)
    return SpatialContext("graph", n, assignment=partition_kway(topo, k, seed=seed).assignment, n_parts=k)


def windows(ctx, task, batch=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, task.window_len, ctx.n_nodes, generator=g, dtype=dtype)


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(model, cases, loss_fn, n_params=240, eps=1e-6, seed=0, must_cover=()):
    """Compare autograd against central differences on sampled scalar parameters.

    ``cases`` is a list of ``(x, ctx, task)``; the loss is summed over them.
    Returns ``(errors, names)`` for the sampled entries.  Each prefix in
    ``must_cover`` gets at least one sampled entry.
    """
    params = dict(model.named_parameters())

    def total():
        return sum(loss_fn(model(x, ctx, task), x, task) for x, ctx, task in cases)

    model.zero_grad(set_to_none=True)
    total().backward()
    rng = np.random.default_rng(seed)
    names = sorted(n for n, p in params.items() if p.grad is not None)
    picks = []
    for prefix in must_cover:
        group = [n for n in names if n.startswith(prefix)]
        if not group:
            raise AssertionError(f"no parameter receives gradient under {prefix!r}")
        for n in group:
            picks.append((n, int(rng.integers(params[n].numel()))))
    while len(picks) < n_params:
        n = names[int(rng.integers(len(names)))]
        picks.append((n, int(rng.integers(params[n].numel()))))
    errors = []
    with torch.no_grad():
        for n, i in picks:
            flat = params[n].view(-1)
            analytic = float(params[n].grad.view(-1)[i])
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(total())
            flat[i] = orig - eps
            down = float(total())
            flat[i] = orig
            errors.append(relative_error(analytic, (up - down) / (2 * eps)))
    return np.asarray(errors), [n for n, _ in picks]
