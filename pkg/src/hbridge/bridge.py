"""QKV-linear alignment and shared attention between the two experts."""

from __future__ import annotations

import torch
from torch import nn

from .errors import InputError
from .layers import attention, attention_weights, init_linears


class LayerAligner(nn.Module):
    """Bias-free maps that move one generative layer's Q/K/V into the
    understanding width, plus the back-projection of the fused output."""

    def __init__(self, d_gen: int, d_und: int):
        super().__init__()
        self.d_gen, self.d_und = d_gen, d_und
        self.wq = nn.Linear(d_gen, d_und, bias=False)
        self.wk = nn.Linear(d_gen, d_und, bias=False)
        self.wv = nn.Linear(d_gen, d_und, bias=False)
        self.back = nn.Linear(d_und, d_gen, bias=False)
        init_linears(self)


def align_qkv(a: LayerAligner, gq: torch.Tensor, gk: torch.Tensor, gv: torch.Tensor):
    for name, x in (("query", gq), ("key", gk), ("value", gv)):
        if x.shape[-1] != a.d_gen:
            raise InputError(f"{name} width {x.shape[-1]} does not match aligner input {a.d_gen}")
    return a.wq(gq), a.wk(gk), a.wv(gv)


def _check_shared(q, und_k, und_v, n_heads):
    d = q.shape[-1]
    if d % n_heads:
        raise InputError(f"width {d} not divisible by {n_heads} heads")
    if und_k.shape != und_v.shape or und_k.shape[-1] != d:
        raise InputError(f"understanding K/V shapes {tuple(und_k.shape)}, {tuple(und_v.shape)} do not match width {d}")


def shared_attention(q, k, v, und_k, und_v, n_heads: int) -> torch.Tensor:
    """Generative queries attend over [understanding keys | generative keys].

    Full (unmasked) attention in both directions of the generative sequence;
    only generative rows are produced, so the understanding side never
    receives an update. All inputs are (B, L, d_u).
    """
    _check_shared(q, und_k, und_v, n_heads)
    return attention(q, torch.cat([und_k, k], dim=1), torch.cat([und_v, v], dim=1), n_heads)


def shared_attention_weights(q, k, und_k, n_heads: int) -> torch.Tensor:
    _check_shared(q, und_k, und_k, n_heads)
    return attention_weights(q, torch.cat([und_k, k], dim=1), n_heads)

