"""Semantic reconstruction tokens, the frozen target encoder and the cosine loss."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import PATCH_DIM
from .data import patchify
from .errors import ConfigError, NumericError
from .layers import Block, check_finite, freeze, init_linears

COS_EPS = 1e-8


class SrtBank(nn.Module):
    """Learnable tokens appended to the generative sequence and the head that
    projects their outputs into the target-feature space."""

    def __init__(self, n_srt: int, d_gen: int, d_feat: int):
        super().__init__()
        if n_srt < 1:
            raise ConfigError("an SRT bank needs at least one token")
        self.tokens = nn.Parameter(torch.randn(n_srt, d_gen) * 0.02)
        self.proj_head = nn.Linear(d_gen, d_feat)
        init_linears(self)

    @property
    def n_srt(self) -> int:
        return self.tokens.shape[0]


class VitProxy(nn.Module):
    """Randomly initialized, frozen two-block encoder over 4x4 patches.

    Stands in for a pretrained vision encoder: it provides a fixed, nonlinear
    embedding of the target pattern for the SRT tokens to reconstruct.
    """

    def __init__(self, d_feat: int, seed: int, n_patches: int = 16, n_heads: int = 4, n_blocks: int = 2):
        super().__init__()
        if d_feat % n_heads:
            n_heads = 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(PATCH_DIM, d_feat)
            self.pos = nn.Parameter(torch.randn(n_patches, d_feat) * 0.1)
            self.blocks = nn.ModuleList(Block(d_feat, n_heads, 2 * d_feat, causal=False) for _ in range(n_blocks))
        freeze(self)

    @property
    def n_patches(self) -> int:
        return self.pos.shape[0]

    def encode(self, patches: torch.Tensor, use_positions: bool = True) -> torch.Tensor:
        """(B, P, patch_dim) -> (B, P, d_feat)."""
        x = self.patch_embed(patches)
        if use_positions:
            x = x + self.pos
        for block in self.blocks:
            x = block(x)[0]
        return x


def adaptive_pool(x: torch.Tensor, n_bins: int) -> torch.Tensor:
    """Order-preserving average pooling of (..., P, d) into (..., n_bins, d).

    Bin b averages rows floor(b*P/n) .. floor((b+1)*P/n) - 1.
    """
    p = x.shape[-2]
    if not 1 <= n_bins <= p:
        raise ConfigError(f"cannot pool {p} patches into {n_bins} bins")
    rows = []
    for b in range(n_bins):
        lo, hi = (b * p) // n_bins, ((b + 1) * p) // n_bins
        rows.append(x[..., lo:hi, :].mean(dim=-2))
    return torch.stack(rows, dim=-2)


def target_features(vp: VitProxy, latents: torch.Tensor, n_srt: int, use_positions: bool = True) -> torch.Tensor:
    """Pooled frozen features from already-patchified targets (B, P, patch_dim)."""
    if n_srt > vp.n_patches:
        raise ConfigError(f"n_srt={n_srt} exceeds the {vp.n_patches} target patches")
    with torch.no_grad():
        return adaptive_pool(vp.encode(latents, use_positions), n_srt)


def extract_target_features(vp: VitProxy, pattern, n_srt: int, use_positions: bool = True) -> torch.Tensor:
    """Pattern(s) of shape (16, 16, 3) or (B, 16, 16, 3) -> (n_srt, d_feat) or (B, n_srt, d_feat)."""
    arr = np.asarray(pattern)
    single = arr.ndim == 3
    dtype = vp.pos.dtype
    latents = torch.as_tensor(patchify(arr.reshape(-1, *arr.shape[-3:])), dtype=dtype)
    out = target_features(vp, latents, n_srt, use_positions)
    return out[0] if single else out


def cosine_distance(pred: torch.Tensor, target: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Mean over rows of 1 - cos(pred_i, target_i), each term clamped to [0, 2]."""
    if pred.shape != target.shape:
        raise NumericError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if not (check_finite(pred) and check_finite(target)):
        raise NumericError("non-finite input to cosine distance")
    dot = (pred * target).sum(-1)
    norms = pred.norm(dim=-1).clamp_min(eps) * target.norm(dim=-1).clamp_min(eps)
    return (1 - dot / norms).clamp(0.0, 2.0).mean()


def srt_loss(bank: SrtBank, srt_out: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return cosine_distance(bank.proj_head(srt_out), target)
