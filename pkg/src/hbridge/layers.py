"""Building blocks shared by the experts and the target-feature encoder."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.view(b, s, n_heads, d // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, s, hd = x.shape
    return x.transpose(1, 2).reshape(b, s, h * hd)


def attention_weights(q: torch.Tensor, k: torch.Tensor, n_heads: int, causal: bool = False) -> torch.Tensor:
    """Softmax attention weights, shape (B, heads, Lq, Lk)."""
    qh, kh = split_heads(q, n_heads), split_heads(k, n_heads)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(qh.shape[-1])
    if causal:
        lq, lk = logits.shape[-2:]
        mask = torch.ones(lq, lk, dtype=torch.bool, device=q.device).triu(1 + lk - lq)
        logits = logits.masked_fill(mask, float("-inf"))
    return logits.softmax(dim=-1)


def attention(q, k, v, n_heads: int, causal: bool = False) -> torch.Tensor:
    w = attention_weights(q, k, n_heads, causal)
    return merge_heads(w @ split_heads(v, n_heads))


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)

    def forward(self, x):
        # tanh-GELU keeps the whole network smooth for finite-difference checks
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Block(nn.Module):
    """Pre-norm transformer block that also reports the keys/values it used."""

    def __init__(self, d: int, n_heads: int, d_ff: int, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.causal = causal
        self.ln1 = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ff)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.ln1(x)
        k, v = self.wk(h), self.wv(h)
        x = x + self.wo(attention(self.wq(h), k, v, self.n_heads, self.causal))
        x = x + self.ff(self.ln2(x))
        return x, k, v


def init_linears(module: nn.Module, std: float = 0.02) -> None:
    """Small-normal weights and zero biases for every Linear under ``module``."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def check_finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())
