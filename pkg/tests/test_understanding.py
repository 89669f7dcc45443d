import pytest
import torch

from hbridge.config import ExpertSpec
from hbridge.errors import InputError
from hbridge.understanding import UnderstandingExpert, lm_loss, und_encode, und_pretrain
from hbridge.data import sample_dataset

SPEC = ExpertSpec(n_layers=3, d_model=16, n_heads=2, d_ff=32, max_seq=8, vocab_size=16)


def make(seed=0):
    torch.manual_seed(seed)
    return UnderstandingExpert(SPEC)


def test_cache_is_deterministic_bitwise():
    und = make()
    tok = torch.tensor([[0, 3, 7, 11, 14, 1]])
    a, b = und_encode(und, tok), und_encode(und, tok)
    for x, y in zip(a.keys + a.values, b.keys + b.values):
        assert x.numpy().tobytes() == y.numpy().tobytes()


def test_single_token_shapes():
    cache = und_encode(make(), [5])
    assert cache.n_layers == 3
    for k, v in zip(cache.keys, cache.values):
        assert k.shape == v.shape == (1, 1, 16)


def test_permuting_tokens_changes_cache():
    und = make()
    a = und_encode(und, [0, 3, 7, 11, 14, 1])
    b = und_encode(und, [0, 7, 3, 11, 14, 1])
    assert not torch.equal(a.keys[0], b.keys[0])
    assert not torch.equal(a.final, b.final)


def test_causality():
    und = make()
    tok = torch.tensor([[0, 3, 7, 11, 14, 1]])
    alt = tok.clone()
    alt[0, 4:] = 0
    a, b = und_encode(und, tok), und_encode(und, alt)
    for l in range(3):
        assert torch.equal(a.keys[l][:, :4], b.keys[l][:, :4])
        assert torch.equal(a.values[l][:, :4], b.values[l][:, :4])
        assert not torch.equal(a.keys[l][:, 4:], b.keys[l][:, 4:])


def test_out_of_vocabulary_and_length_errors():
    und = make()
    with pytest.raises(InputError):
        und_encode(und, [0, 16])
    with pytest.raises(InputError):
        und_encode(und, list(range(9)))


def test_cache_independent_of_generator_presence(cfg):
    from hbridge.model import HBridgeModel

    m = HBridgeModel(cfg)
    solo = UnderstandingExpert(cfg.und)
    solo.load_state_dict(m.und.state_dict())
    tok = [0, 2, 6, 10, 14, 1]
    a, b = m.encode(tok), und_encode(solo, tok)
    assert all(torch.equal(x, y) for x, y in zip(a.keys + a.values, b.keys + b.values))


def test_pretrain_reduces_lm_loss_and_is_deterministic():
    captions = sample_dataset(256, 3).tokens
    und = make(1)
    losses = und_pretrain(und, captions, 200, seed=4, lr=1e-3)
    assert losses[-1] < losses[0]
    again = und_pretrain(make(1), captions, 200, seed=4, lr=1e-3)
    assert losses == again


def test_pretrain_zero_steps_is_identity():
    und = make(2)
    before = {k: v.clone() for k, v in und.state_dict().items()}
    assert und_pretrain(und, sample_dataset(8, 0).tokens, 0) == []
    assert all(torch.equal(before[k], v) for k, v in und.state_dict().items())


def test_lm_loss_is_finite():
    tok = torch.as_tensor(sample_dataset(4, 0).tokens)
    assert torch.isfinite(lm_loss(make(), tok))
