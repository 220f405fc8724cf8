import numpy as np
import pytest
import torch

from helpers import TINY_MODEL, TINY_PATCH, TINY_TASK, graph_ctx, grid_ctx, tiny_model, windows
from uniflow.data import TaskSpec
from uniflow.model import ModelConfig, UniFlow
from uniflow.patching import PatchLayout
from uniflow.training import horizon_mse


@pytest.fixture(params=["grid", "graph"])
def ctx(request):
    return grid_ctx() if request.param == "grid" else graph_ctx()


def test_output_shape_matches_window(ctx):
    m = tiny_model()
    x = windows(ctx, TINY_TASK, batch=3)
    assert m(x, ctx, TINY_TASK).shape == x.shape


@pytest.mark.parametrize("L", [1, 3, 96])
def test_encoder_preserves_rows(L):
    m = tiny_model()
    assert m.encode(torch.randn(2, L, 8, dtype=torch.float64)).shape == (2, L, 8)


def test_encoder_rejects_empty():
    with pytest.raises(ValueError):
        tiny_model().encode(torch.zeros(1, 0, 8, dtype=torch.float64))


def test_encoder_permutation_equivariant():
    m = tiny_model()
    s = torch.randn(1, 10, 8, dtype=torch.float64)
    perm = torch.randperm(10, generator=torch.Generator().manual_seed(1))
    assert torch.allclose(m.encode(s[:, perm]), m.encode(s)[:, perm], atol=1e-5)


def test_attention_rows_stochastic(ctx):
    m = tiny_model()
    mods = m.attention_modules()
    for a in mods:
        a.keep_weights = True
    m(windows(ctx, TINY_TASK), ctx, TINY_TASK)
    seen = [a.last_weights for a in mods if a.last_weights is not None]
    assert len(seen) == 3  # encoder, decoder, time-pattern block
    for w in seen:
        assert torch.all(w >= 0)
        assert torch.max(torch.abs(w.sum(-1) - 1)) < 1e-6


def test_decoder_input_without_future_is_encoder_output():
    m = tiny_model(model_cfg=TINY_MODEL.__class__(**{**TINY_MODEL.to_dict(), "banks": ()}))
    layout = PatchLayout.build(3, 2, 3)
    z_e = torch.randn(1, 6, 8, dtype=torch.float64)
    pos = torch.randn(6, 8, dtype=torch.float64)
    assert torch.equal(m.assemble_decoder_input(z_e, pos, layout), z_e)


def test_future_rows_are_mask_token_plus_position():
    m = tiny_model()
    layout = PatchLayout.build(4, 2, 1)
    z_e = torch.randn(1, 2, 8, dtype=torch.float64)
    pos = torch.randn(8, 8, dtype=torch.float64)
    z_d = m.assemble_decoder_input(z_e, pos, layout)
    assert torch.equal(z_d[0, :2], z_e[0])
    torch.testing.assert_close(z_d[0, 2:], m.mask_token + pos[2:], rtol=0, atol=1e-12)
    # two future rows differ only by their positional encodings
    torch.testing.assert_close(z_d[0, 5] - z_d[0, 3], pos[5] - pos[3], rtol=0, atol=1e-6)


def test_decoder_input_alignment_checked():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.assemble_decoder_input(torch.zeros(1, 3, 8, dtype=torch.float64), torch.zeros(8, 8, dtype=torch.float64),
                                 PatchLayout.build(4, 2, 1))


def test_zeroed_residual_branches_give_identity_decode():
    m = tiny_model()
    for blk in m.decoder:
        blk.zero_residual_branches()
    z = torch.randn(2, 7, 8, dtype=torch.float64)
    assert torch.equal(m.decode(z), z)


def test_history_change_reaches_future_outputs(ctx):
    m = tiny_model()
    x = windows(ctx, TINY_TASK)
    y = x.clone()
    y[:, 0] += 1.0
    a, b = m(x, ctx, TINY_TASK), m(y, ctx, TINY_TASK)
    assert torch.max(torch.abs(a[:, 8:] - b[:, 8:])) > 0


def test_future_inputs_never_leak(ctx):
    m = tiny_model()
    x = windows(ctx, TINY_TASK)
    for t in range(8, 12):
        y = x.clone()
        y[:, t] = torch.randn_like(y[:, t]) * 50
        assert torch.equal(m(x, ctx, TINY_TASK), m(y, ctx, TINY_TASK))


def test_inference_deterministic(ctx):
    m = tiny_model()
    x = windows(ctx, TINY_TASK)
    assert torch.equal(m(x, ctx, TINY_TASK), m(x, ctx, TINY_TASK))


def test_eval_mode_disables_dropout():
    cfg = ModelConfig(**{**TINY_MODEL.to_dict(), "dropout": 0.5})
    m = tiny_model(model_cfg=cfg)
    ctx = grid_ctx()
    x = windows(ctx, TINY_TASK)
    assert torch.equal(m(x, ctx, TINY_TASK), m(x, ctx, TINY_TASK))


def test_trace_exposes_intermediates():
    m = tiny_model()
    ctx = grid_ctx()
    _, tr = m(windows(ctx, TINY_TASK), ctx, TINY_TASK, trace=True)
    assert tr.z_e.shape == (2, tr.layout.history_len, 8)
    assert tr.z_d.shape == tr.y.shape == (2, tr.layout.length, 8)
    assert set(tr.prompts.prompts) == set(TINY_MODEL.banks)


def test_size_limits_enforced():
    m = tiny_model()
    ctx = grid_ctx(8, 8)  # 16 units > max_units=8
    with pytest.raises(ValueError):
        m(windows(ctx, TINY_TASK), ctx, TINY_TASK)
    with pytest.raises(ValueError):
        m(windows(grid_ctx(), TaskSpec(32, 4)), grid_ctx(), TaskSpec(32, 4))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(banks=("time", "weather"))
    cfg = ModelConfig(banks=("freq_spatial", "time"))
    assert cfg.banks == ("time", "freq_spatial")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        UniFlow(TINY_PATCH, ModelConfig(d_model=16, heads=2))


def test_gradients_finite_and_nonzero():
    m = tiny_model(scramble=False)
    ctx = grid_ctx()
    x = windows(ctx, TINY_TASK, batch=4)
    loss = horizon_mse(m(x, ctx, TINY_TASK), x, TINY_TASK)
    loss.backward()
    grads = [p.grad for p in m.parameters() if p.grad is not None]
    assert all(torch.isfinite(g).all() for g in grads)
    assert sum(float(g.abs().sum()) for g in grads) > 0
    assert np.isfinite(loss.item())
