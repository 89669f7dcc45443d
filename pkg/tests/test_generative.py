import pytest
import torch

from hbridge.config import tiny_config
from hbridge.errors import InputError
from hbridge.model import HBridgeModel


def _inputs(model, b=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, 16, 48, generator=g, dtype=model.dtype)
    t = torch.rand(b, generator=g, dtype=model.dtype)
    tokens = torch.tensor([[0, 2 + i % 4, 6 + i % 3, 10 + i % 4, 14 + i % 2, 1] for i in range(b)])
    return x, t, tokens


def test_decoupled_pass_is_bitwise_standalone():
    cfg = tiny_config(bridge=dict(skip_front=2, skip_back=2, decoupled=True))
    m = HBridgeModel(cfg)
    x, t, tok = _inputs(m)
    a = m.forward_flow(m.encode(tok), x, t)[0]
    b = m.gen(x, t, m.srt.tokens)[0]
    assert a.detach().numpy().tobytes() == b.detach().numpy().tobytes()


def test_time_conditioning_matters(model):
    x, _, tok = _inputs(model)
    cache = model.encode(tok)
    v0 = model.forward_flow(cache, x, 0.0)[0]
    v1 = model.forward_flow(cache, x, 1.0)[0]
    assert not torch.allclose(v0, v1)


@pytest.mark.parametrize("layer", range(4))
def test_bridge_locality(model, layer):
    """Perturbing understanding layer l moves the output iff l feeds a bridge."""
    x, t, tok = _inputs(model)
    cache = model.encode(tok)
    with torch.no_grad():
        base = model.forward_flow(cache, x, t)[0]
        moved = model.forward_flow(cache.map_layer(layer, lambda z: 2 * z), x, t)[0]
    used = layer in {u for u, _ in model.plan.bridged}
    assert (not torch.equal(base, moved)) == used


def test_shapes(model):
    for b in (1, 5):
        x, t, tok = _inputs(model, b)
        v, srt_out, latent = model.forward_flow(model.encode(tok), x, t)
        assert v.shape == (b, 16, 48)
        assert srt_out.shape == (b, model.cfg.n_srt, model.cfg.gen.d_model)
        assert latent.shape == (b, 16, model.cfg.gen.d_model)


def test_bad_latent_shape_raises(model):
    with pytest.raises(InputError):
        model.forward_flow(None, torch.zeros(2, 15, 48), 0.5)


def test_cache_batch_mismatch_raises(model):
    x, t, tok = _inputs(model, 3)
    with pytest.raises(InputError):
        model.forward_flow(model.encode(tok[:2]), x, t)


def test_permutation_equivariance_without_srt():
    """No causal mask in the generator: permuting latent tokens together with
    their position rows permutes the output."""
    cfg = tiny_config(train=dict(srt_enabled=False))
    m = HBridgeModel(cfg).double()
    x, t, tok = _inputs(m)
    cache = m.encode(tok)
    with torch.no_grad():
        v = m.forward_flow(cache, x, t)[0]
        perm = torch.arange(15, -1, -1)
        m.gen.pos.copy_(m.gen.pos[perm])
        vp = m.forward_flow(cache, x[:, perm], t)[0]
    assert torch.allclose(vp, v[:, perm], atol=1e-12)


def test_disconnect_equals_plan_removal(model):
    from hbridge.generative import gen_forward

    x, t, tok = _inputs(model)
    cache = model.encode(tok)
    g = model.plan.gen_layers[0]
    a = model.forward_flow(cache, x, t, disconnect=(g,))[0]
    b = gen_forward(
        model.gen, model.plan.without({g}), model.aligners, cache, x, t, model.srt.tokens, model.cfg.und.n_heads
    )[0]
    assert torch.equal(a, b)


def test_shallow_mode_reads_only_last_layer():
    m = HBridgeModel(tiny_config(bridge=dict(fusion_mode="shallow")))
    x, t, tok = _inputs(m)
    cache = m.encode(tok)
    with torch.no_grad():
        base = m.forward_flow(cache, x, t)[0]
        for layer in range(3):
            assert torch.equal(base, m.forward_flow(cache.map_layer(layer, lambda z: z * 3), x, t)[0])
        assert not torch.equal(base, m.forward_flow(cache.map_layer(3, lambda z: z * 3), x, t)[0])
