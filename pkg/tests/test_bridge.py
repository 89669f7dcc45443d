import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hbridge.bridge import LayerAligner, align_qkv, shared_attention, shared_attention_weights
from hbridge.errors import InputError
from hbridge.layers import attention


def test_identity_aligner_passes_queries_through():
    a = LayerAligner(8, 8).double()
    with torch.no_grad():
        for lin in (a.wq, a.wk, a.wv):
            lin.weight.copy_(torch.eye(8))
    g = torch.randn(1, 5, 8, dtype=torch.float64)
    q, k, v = align_qkv(a, g, g, g)
    assert torch.equal(q, g) and torch.equal(k, g) and torch.equal(v, g)


def test_zero_input_maps_to_zero():
    a = LayerAligner(6, 4)
    z = torch.zeros(2, 3, 6)
    assert all(torch.count_nonzero(x) == 0 for x in align_qkv(a, z, z, z))


def test_small_case_matches_hand_product():
    a = LayerAligner(3, 2).double()
    w = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]])
    with torch.no_grad():
        a.wq.weight.copy_(torch.from_numpy(w))
    g = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]])
    q, _, _ = align_qkv(a, torch.from_numpy(g)[None], torch.zeros(1, 2, 3, dtype=torch.float64), torch.zeros(1, 2, 3, dtype=torch.float64))
    expected = [[sum(g[r][c] * w[o][c] for c in range(3)) for o in range(2)] for r in range(2)]
    assert np.allclose(q[0].detach().numpy(), expected, rtol=0, atol=1e-15)


def test_width_mismatch_raises():
    a = LayerAligner(6, 4)
    x = torch.zeros(1, 2, 5)
    with pytest.raises(InputError):
        align_qkv(a, x, x, x)


def test_empty_understanding_sequence_is_plain_self_attention():
    q, k, v = (torch.randn(2, 7, 8, dtype=torch.float64) for _ in range(3))
    empty = torch.zeros(2, 0, 8, dtype=torch.float64)
    assert torch.equal(shared_attention(q, k, v, empty, empty, 2), attention(q, k, v, 2))


def test_dominant_understanding_key_copies_its_value():
    torch.manual_seed(0)
    d, heads = 8, 2
    q = torch.ones(1, 4, d, dtype=torch.float64)
    k = torch.zeros(1, 4, d, dtype=torch.float64)
    v = torch.randn(1, 4, d, dtype=torch.float64)
    und_k = torch.full((1, 1, d), 50.0, dtype=torch.float64)
    und_v = torch.randn(1, 1, d, dtype=torch.float64)
    out = shared_attention(q, k, v, und_k, und_v, heads)
    assert torch.allclose(out[0], und_v[0].expand(4, -1), atol=1e-4)


def test_identical_keys_get_equal_weights():
    q = torch.randn(1, 3, 8)
    k = torch.randn(1, 4, 8)
    k[0, 2] = k[0, 1]
    w = shared_attention_weights(q, k, torch.randn(1, 2, 8), 2)
    assert torch.allclose(w[..., 2 + 1], w[..., 2 + 2])


@settings(max_examples=25, deadline=None)
@given(lg=st.integers(1, 6), lu=st.integers(0, 6), heads=st.sampled_from([1, 2, 4]), seed=st.integers(0, 10_000))
def test_rows_are_stochastic(lg, lu, heads, seed):
    g = torch.Generator().manual_seed(seed)
    q, k = (torch.randn(2, lg, 8, generator=g, dtype=torch.float64) * 3 for _ in range(2))
    uk = torch.randn(2, lu, 8, generator=g, dtype=torch.float64) * 3
    w = shared_attention_weights(q, k, uk, heads)
    assert w.shape == (2, heads, lg, lu + lg)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_understanding_rows_never_updated():
    # only generative rows come back, whatever the understanding length
    q, k, v = (torch.randn(1, 5, 8) for _ in range(3))
    uk, uv = torch.randn(1, 9, 8), torch.randn(1, 9, 8)
    assert shared_attention(q, k, v, uk, uv, 2).shape == (1, 5, 8)
