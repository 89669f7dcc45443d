"""Trainable DiT-style generator with a noise-projector prefix and bridged layers."""

from __future__ import annotations

import math
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .bridge import LayerAligner, align_qkv, shared_attention
from .config import N_LATENT_TOKENS, PATCH_DIM, BridgePlan, ExpertSpec
from .errors import InputError
from .layers import FeedForward, attention, init_linears
from .understanding import UndCache


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (t * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class GenBlock(nn.Module):
    """Pre-norm block whose norms are modulated by the time embedding.

    When handed an aligner and understanding K/V it runs shared attention in
    the understanding geometry; otherwise plain self-attention.
    """

    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, d_ff)
        self.mod = nn.Linear(d, 4 * d)

    def forward(self, x, temb, bridge=None):
        scale1, shift1, scale2, shift2 = self.mod(temb)[:, None].chunk(4, dim=-1)
        h = self.ln1(x) * (1 + scale1) + shift1
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        if bridge is None:
            o = attention(q, k, v, self.n_heads)
        else:
            aligner, und_k, und_v, und_heads = bridge
            q, k, v = align_qkv(aligner, q, k, v)
            o = aligner.back(shared_attention(q, k, v, und_k, und_v, und_heads))
        x = x + self.wo(o)
        x = x + self.ff(self.ln2(x) * (1 + scale2) + shift2)
        return x


class GenerativeExpert(nn.Module):
    def __init__(self, spec: ExpertSpec, n_srt: int, time_embed_dim: int, out_bias=None):
        super().__init__()
        self.spec = spec
        self.n_srt = n_srt
        self.time_embed_dim = time_embed_dim
        d = spec.d_model
        self.patch_embed = nn.Linear(PATCH_DIM, d)
        self.pos = nn.Parameter(torch.randn(N_LATENT_TOKENS + n_srt, d) * 0.5)
        self.time_mlp = nn.Sequential(nn.Linear(time_embed_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(GenBlock(d, spec.n_heads, spec.d_ff) for _ in range(spec.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, PATCH_DIM)
        # Adam moves each weight ~lr per step, so small weights adapt fastest;
        # the head starts wide enough to reach unit-scale velocities and its
        # bias at the mean velocity target E[x1 - x0] = E[x1].
        init_linears(self)
        nn.init.normal_(self.head.weight, std=0.25)
        if out_bias is not None:
            with torch.no_grad():
                self.head.bias.copy_(torch.as_tensor(out_bias, dtype=self.head.bias.dtype))

    def forward(self, x_t, t, srt_tokens=None):
        """Standalone (unconditioned) pass; returns (velocity, srt_out, latent_hidden)."""
        return gen_forward(self, None, None, None, x_t, t, srt_tokens)


def _as_time(t, batch: int, dtype) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=dtype)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise InputError(f"time must be a scalar or shape ({batch},), got {tuple(t.shape)}")
    return t


def gen_forward(
    gen: GenerativeExpert,
    plan: BridgePlan | None,
    aligners: Mapping[str, LayerAligner] | None,
    cache: UndCache | None,
    x_t: torch.Tensor,
    t,
    srt_tokens: torch.Tensor | None = None,
    und_heads: int | None = None,
):
    """Run the generator on latent tokens ``x_t`` (B, 16, 48) at time ``t``.

    The first ``plan.projector_depth`` blocks are self-attention only; aligned
    block ``j`` bridges to the understanding layer paired with it in
    ``plan.bridged``. With ``plan=None`` (or an empty bridge) no aligner or
    cache is read. Returns ``(velocity, srt_out, latent_hidden)`` where
    ``latent_hidden`` is the final-norm state of the latent tokens.
    """
    if x_t.dim() != 3 or x_t.shape[1:] != (N_LATENT_TOKENS, PATCH_DIM):
        raise InputError(f"x_t must be (B, {N_LATENT_TOKENS}, {PATCH_DIM}), got {tuple(x_t.shape)}")
    b = x_t.shape[0]
    n_srt = 0 if srt_tokens is None else srt_tokens.shape[0]
    if n_srt != gen.n_srt:
        raise InputError(f"generator was built for {gen.n_srt} SRT tokens, got {n_srt}")
    t = _as_time(t, b, x_t.dtype)
    if plan is not None:
        if plan.projector_depth + plan.aligned_count != len(gen.blocks):
            raise InputError("bridge plan does not match generator depth")
        if plan.bridged and (cache is None or aligners is None or und_heads is None):
            raise InputError("bridged plan needs an understanding cache, aligners and head count")

    x = gen.patch_embed(x_t)
    if n_srt:
        x = torch.cat([x, srt_tokens[None].expand(b, -1, -1)], dim=1)
    x = x + gen.pos
    temb = F.silu(gen.time_mlp(timestep_embedding(t, gen.time_embed_dim)))

    depth = 0 if plan is None else plan.projector_depth
    for i, block in enumerate(gen.blocks):
        bridge = None
        if plan is not None and i >= depth:
            u = plan.und_layer_for(i - depth)
            if u is not None:
                und_k, und_v = cache.layer(u)
                if und_k.shape[0] != b:
                    raise InputError(f"cache batch {und_k.shape[0]} does not match latent batch {b}")
                bridge = (aligners[str(i - depth)], und_k, und_v, und_heads)
        x = block(x, temb, bridge)

    x = gen.ln_f(x)
    latent = x[:, :N_LATENT_TOKENS]
    return gen.head(latent), x[:, N_LATENT_TOKENS:], latent
