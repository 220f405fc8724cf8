import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uniflow.data import GraphTopology, TaskSpec
from uniflow.partition import Partition
from uniflow.patching import (
    GraphHead,
    GraphPatcher,
    GridPatcher,
    PatchConfig,
    PatchError,
    PatchLayout,
    SpatialContext,
    mask_history,
    patch_graph,
    patch_grid,
    unpatch_graph,
    unpatch_grid,
)


def averaging(patcher):
    with torch.no_grad():
        w = patcher.conv.weight
        w.fill_(1.0 / w[0].numel())
        patcher.conv.bias.zero_()
    return patcher


def ring_partition(n, k):
    topo = GraphTopology.from_edges(n, [(i, i + 1) for i in range(n - 1)])
    return Partition.from_assignment(topo, np.arange(n) * k // n, k)


def test_grid_length_example():
    cfg = PatchConfig(p_t=3, p_s=8, d_model=8)
    seq = patch_grid(torch.zeros(24, 32, 32), cfg, GridPatcher(cfg), TaskSpec(12, 12))
    assert seq.layout.length == 128 and seq.embeddings.shape == (128, 8)


def test_grid_identity_case():
    cfg = PatchConfig(p_t=2, p_s=2, d_model=8)
    seq = patch_grid(torch.zeros(2, 2, 2), cfg, GridPatcher(cfg), TaskSpec(2, 0))
    assert seq.layout.length == 1


def test_graph_length_example():
    cfg = PatchConfig(p_t=3, d_model=8, num_subgraphs=2)
    seq = patch_graph(torch.zeros(12, 8), ring_partition(8, 2), cfg, GraphPatcher(cfg), TaskSpec(6, 6))
    assert seq.layout.length == 8


def test_history_future_split():
    cfg = PatchConfig(p_t=4, p_s=1, d_model=8)
    layout = SpatialContext("grid", 1, 1, 1).layout(TaskSpec(12, 12), cfg)
    assert len(layout.history_positions) == 3 and len(layout.future_positions) == 3
    seq = patch_grid(torch.zeros(24, 1, 1), cfg, GridPatcher(cfg), TaskSpec(12, 12))
    s_h, fut = mask_history(seq)
    assert s_h.shape[0] + len(fut) == seq.layout.length


def test_no_horizon_means_all_history():
    cfg = PatchConfig(p_t=4, p_s=1, d_model=8)
    seq = patch_grid(torch.randn(12, 2, 2), cfg, GridPatcher(cfg), TaskSpec(12, 0))
    s_h, fut = mask_history(seq)
    assert torch.equal(s_h, seq.embeddings) and len(fut) == 0


@settings(max_examples=50, deadline=None)
@given(nb=st.integers(1, 6), nu=st.integers(1, 9), data=st.data())
def test_layout_is_bijection(nb, nu, data):
    nh = data.draw(st.integers(1, nb))
    layout = PatchLayout.build(nb, nu, nh)
    pairs = set(zip(layout.block.tolist(), layout.unit.tolist()))
    assert len(pairs) == layout.length == nb * nu
    assert all(layout.index(b, u) == i for i, (b, u) in enumerate(zip(layout.block, layout.unit)))
    assert np.array_equal(layout.is_history, layout.block < nh)
    # history is a prefix
    assert np.array_equal(layout.history_positions, np.arange(layout.history_len))


@settings(max_examples=30, deadline=None)
@given(p_t=st.integers(1, 4), p_s=st.integers(1, 3), hb=st.integers(1, 3), fb=st.integers(0, 3),
       hs=st.integers(1, 3), ws=st.integers(1, 3), parts=st.integers(1, 5))
def test_length_formulas(p_t, p_s, hb, fb, hs, ws, parts):
    task = TaskSpec(hb * p_t, fb * p_t)
    cfg = PatchConfig(p_t=p_t, p_s=p_s, d_model=8, num_subgraphs=parts)
    H, W = hs * p_s, ws * p_s
    grid = SpatialContext("grid", H * W, H, W).layout(task, cfg)
    assert grid.length == (task.window_len // p_t) * (H // p_s) * (W // p_s)
    assert grid.history_len == (task.history_len // p_t) * (H // p_s) * (W // p_s)
    graph = SpatialContext("graph", parts, assignment=np.arange(parts), n_parts=parts).layout(task, cfg)
    assert graph.length == (task.window_len // p_t) * parts


def test_bad_divisibility():
    cfg = PatchConfig(p_t=5, p_s=2, d_model=8)
    with pytest.raises(PatchError):
        SpatialContext("grid", 4, 2, 2).layout(TaskSpec(12, 12), cfg)
    with pytest.raises(PatchError):
        SpatialContext("grid", 9, 3, 3).layout(TaskSpec(10, 10), cfg)
    with pytest.raises(PatchError):
        PatchConfig(d_model=4)


def test_grid_averaging_kernel_gives_block_means():
    cfg = PatchConfig(p_t=4, p_s=2, d_model=8)
    x = torch.randn(3, 24, 6, 8, dtype=torch.float64)
    patcher = averaging(GridPatcher(cfg).double())
    out = patcher(x).detach().numpy()
    v = x.numpy().reshape(3, 6, 4, 3, 2, 4, 2).mean(axis=(2, 4, 6))  # B, nb, hs, ws
    expected = v.reshape(3, -1)
    for d in range(cfg.d_model):
        np.testing.assert_allclose(out[..., d], expected, atol=1e-5)


def test_graph_averaging_kernel_gives_subgraph_block_means():
    cfg = PatchConfig(p_t=4, d_model=8, num_subgraphs=3)
    part = ring_partition(9, 3)
    x = torch.randn(2, 24, 9, dtype=torch.float64)
    patcher = averaging(GraphPatcher(cfg).double())
    seq = patch_graph(x, part, cfg, patcher, TaskSpec(12, 12))
    blocks = x.numpy().reshape(2, 6, 4, 9).mean(axis=2)  # B, nb, N
    sub = np.stack([blocks[..., part.assignment == s].mean(-1) for s in range(3)], axis=-1)
    np.testing.assert_allclose(seq.embeddings.detach().numpy()[..., 0], sub.reshape(2, -1), atol=1e-5)


def test_identical_nodes_give_identical_subgraph_tokens():
    cfg = PatchConfig(p_t=4, d_model=8, num_subgraphs=3)
    x = torch.randn(24, 1).expand(24, 9)
    seq = patch_graph(x, ring_partition(9, 3), cfg, GraphPatcher(cfg), TaskSpec(12, 12))
    e = seq.embeddings.reshape(6, 3, 8)
    assert torch.allclose(e, e[:, :1].expand_as(e))


@pytest.mark.parametrize("kind", ["grid", "graph"])
def test_future_perturbation_leaves_history_patches(kind):
    cfg = PatchConfig(p_t=4, p_s=2, d_model=8, num_subgraphs=3)
    task = TaskSpec(12, 12)
    x = torch.randn(24, 4, 6)
    if kind == "grid":
        enc = lambda w: patch_grid(w, cfg, patcher, task)
        patcher = GridPatcher(cfg)
    else:
        x = x.reshape(24, 24)
        part = ring_partition(24, 3)
        patcher = GraphPatcher(cfg)
        enc = lambda w: patch_graph(w, part, cfg, patcher, task)
    y = x.clone()
    y[12:] += torch.randn_like(y[12:]) * 100
    a, _ = mask_history(enc(x))
    b, _ = mask_history(enc(y))
    assert torch.equal(a, b)


def test_unpatch_grid_one_hot_scatter():
    cfg = PatchConfig(p_t=2, p_s=2, d_model=8)
    ctx = SpatialContext("grid", 24, 4, 6)
    layout = ctx.layout(TaskSpec(2, 2), cfg)
    P = cfg.p_t * cfg.p_s * cfg.p_s
    for idx in range(layout.length):
        for j in range(P):
            v = torch.zeros(1, layout.length, P)
            v[0, idx, j] = 1.0
            out = unpatch_grid(v, layout, cfg, 4, 6)[0]
            t, h, w = (int(a) for a in torch.nonzero(out)[0])
            b, u = layout.block[idx], layout.unit[idx]
            dt, dh, dw = np.unravel_index(j, (cfg.p_t, cfg.p_s, cfg.p_s))
            assert (t, h, w) == (b * 2 + dt, (u // 3) * 2 + dh, (u % 3) * 2 + dw)
            assert out.sum() == 1


def test_unpatch_grid_inverts_patch_order():
    cfg = PatchConfig(p_t=2, p_s=2, d_model=8)
    layout = SpatialContext("grid", 24, 4, 6).layout(TaskSpec(4, 2), cfg)
    x = torch.arange(6 * 4 * 6, dtype=torch.float64).reshape(1, 6, 4, 6)
    # patch values laid out exactly as the conv reads them
    v = x.reshape(1, 3, 2, 2, 2, 3, 2).permute(0, 1, 3, 5, 2, 4, 6).reshape(1, layout.length, 8)
    assert torch.equal(unpatch_grid(v, layout, cfg, 4, 6), x)
    counts = unpatch_grid(torch.ones(1, layout.length, 8), layout, cfg, 4, 6)
    assert counts.sum() == 6 * 4 * 6 and torch.all(counts == 1)


def test_unpatch_graph_broadcast_and_coverage():
    cfg = PatchConfig(p_t=4, d_model=8, num_subgraphs=3)
    part = ring_partition(9, 3)
    layout = SpatialContext("graph", 9, assignment=part.assignment, n_parts=3).layout(TaskSpec(8, 4), cfg)
    head = GraphHead(cfg)
    y = torch.randn(2, layout.length, 8)
    skip = torch.randn(2, layout.n_blocks, 9, 8)
    out = head(y, skip, part.assignment, layout)
    assert out.shape == (2, 12, 9)
    for s in range(3):
        members = out[..., part.assignment == s]
        assert torch.equal(members, members[..., :1].expand_as(members))
    ones = unpatch_graph(torch.ones(1, layout.length, 4), torch.zeros(1, layout.n_blocks, 9, 4),
                         part.assignment, layout, cfg)
    assert torch.all(ones == 1) and ones.numel() == 12 * 9


def test_single_node_graph_head_is_linear():
    cfg = PatchConfig(p_t=4, d_model=8, num_subgraphs=1)
    layout = SpatialContext("graph", 1, assignment=np.zeros(1, dtype=int), n_parts=1).layout(TaskSpec(4, 4), cfg)
    head = GraphHead(cfg)
    y = torch.randn(1, 2, 8)
    out = head(y, torch.randn(1, 2, 1, 8), np.zeros(1, dtype=int), layout)
    assert torch.allclose(out[0, :, 0], head.proj(y[0]).reshape(-1))
