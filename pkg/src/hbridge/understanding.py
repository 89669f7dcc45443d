"""Frozen causal text transformer that supplies per-layer keys and values."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ExpertSpec
from .errors import DivergenceError, InputError
from .layers import Block, check_finite


@dataclass
class UndCache:
    """Keys/values produced inside each understanding layer, plus final hiddens.

    Every tensor is (B, S, d_u); ``keys[l]`` is what layer ``l`` attended with.
    """

    keys: tuple[torch.Tensor, ...]
    values: tuple[torch.Tensor, ...]
    final: torch.Tensor

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def layer(self, l: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.keys[l], self.values[l]

    def map_layer(self, l: int, fn) -> "UndCache":
        """Copy with ``fn`` applied to layer ``l``'s keys and values."""
        keys, values = list(self.keys), list(self.values)
        keys[l], values[l] = fn(keys[l]), fn(values[l])
        return UndCache(tuple(keys), tuple(values), self.final)

    def index(self, sel) -> "UndCache":
        return UndCache(
            tuple(k[sel] for k in self.keys), tuple(v[sel] for v in self.values), self.final[sel]
        )


class UnderstandingExpert(nn.Module):
    def __init__(self, spec: ExpertSpec):
        super().__init__()
        if spec.vocab_size is None:
            raise InputError("understanding expert needs a vocabulary size")
        self.spec = spec
        d = spec.d_model
        self.tok_emb = nn.Embedding(spec.vocab_size, d)
        self.pos_emb = nn.Parameter(torch.randn(spec.max_seq, d) * 0.5)
        nn.init.normal_(self.tok_emb.weight, std=0.5)
        self.blocks = nn.ModuleList(
            Block(d, spec.n_heads, spec.d_ff, causal=True) for _ in range(spec.n_layers)
        )
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, spec.vocab_size, bias=False)

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.dim() != 2:
            raise InputError(f"tokens must be (batch, seq), got shape {tuple(tokens.shape)}")
        if tokens.shape[1] > self.spec.max_seq:
            raise InputError(f"caption length {tokens.shape[1]} exceeds max_seq {self.spec.max_seq}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.spec.vocab_size):
            raise InputError(f"token id out of vocabulary [0, {self.spec.vocab_size})")

    def run(self, tokens: torch.Tensor) -> tuple[torch.Tensor, UndCache]:
        self._check_tokens(tokens)
        x = self.tok_emb(tokens) + self.pos_emb[: tokens.shape[1]]
        keys, values = [], []
        for block in self.blocks:
            x, k, v = block(x)
            keys.append(k)
            values.append(v)
        final = self.ln_f(x)
        return final, UndCache(tuple(keys), tuple(values), final)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Next-token logits, (B, S, vocab)."""
        final, _ = self.run(tokens)
        return self.lm_head(final)


def und_encode(und: UnderstandingExpert, tokens) -> UndCache:
    """Encode caption tokens (B, S) or (S,) into a cache.

    Gradients are never tracked; the cache only conditions the generator.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    with torch.no_grad():
        return und.run(tokens)[1]


def lm_loss(und: UnderstandingExpert, tokens: torch.Tensor) -> torch.Tensor:
    logits = und(tokens[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))


def und_pretrain(
    und: UnderstandingExpert,
    captions,
    steps: int,
    *,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> list[float]:
    """Next-token pretraining on caption sequences; returns per-step losses.

    Weights are updated in place. With ``steps=0`` nothing is touched.
    """
    from .optim import AdamW

    captions = torch.as_tensor(captions, dtype=torch.long)
    if steps == 0:
        return []
    params = [p for p in und.parameters() if p.requires_grad]
    if not params:
        raise InputError("understanding expert is frozen; unfreeze before pretraining")
    opt = AdamW(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    for step in range(steps):
        idx = torch.randint(0, len(captions), (batch_size,), generator=gen)
        loss = lm_loss(und, captions[idx])
        if not check_finite(loss):
            raise DivergenceError(step, "language-model loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
