"""The two-expert bundle: frozen understanding expert, generator, aligners,
SRT bank and target encoder, wired according to a resolved bridge plan."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .bridge import LayerAligner
from .config import HBridgeConfig, BridgePlan
from .data import latent_mean, patchify, unpatchify
from .flowmatch import euler_sample
from .generative import GenerativeExpert, gen_forward
from .layers import freeze
from .srt import SrtBank, VitProxy
from .understanding import UndCache, UnderstandingExpert, und_encode

ROLES = ("aligners", "srt", "gen_blocks", "heads")


def role_of(name: str) -> str:
    """Tensor role used to stratify gradient checks and coverage reports."""
    top = name.split(".", 1)[0]
    if top in ("und", "vit"):
        return top
    if top == "aligners":
        return "aligners"
    if top == "srt":
        return "srt"
    if name.startswith("gen.blocks."):
        return "gen_blocks"
    return "heads"


class HBridgeModel(nn.Module):
    def __init__(self, cfg: HBridgeConfig):
        super().__init__()
        self.cfg = cfg
        self.plan: BridgePlan = cfg.plan
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.train.seed)
            self.und = UnderstandingExpert(cfg.und)
            self.gen = GenerativeExpert(cfg.gen, cfg.n_srt, cfg.time_embed_dim, latent_mean())
            self.aligners = nn.ModuleDict(
                {str(g): LayerAligner(cfg.gen.d_model, cfg.und.d_model) for g in self.plan.gen_layers}
            )
            self.srt = SrtBank(cfg.n_srt, cfg.gen.d_model, cfg.d_feat) if cfg.n_srt else None
        self.vit = VitProxy(cfg.d_feat, cfg.vit_seed)
        freeze(self.und)

    @property
    def dtype(self) -> torch.dtype:
        return self.gen.pos.dtype

    def encode(self, tokens) -> UndCache:
        return und_encode(self.und, tokens)

    def empty_cache(self, batch: int) -> UndCache:
        z = torch.zeros(batch, 0, self.cfg.und.d_model, dtype=self.dtype)
        n = self.cfg.und.n_layers
        return UndCache((z,) * n, (z,) * n, z)

    def forward_flow(self, cache: UndCache | None, x_t, t, disconnect=()):
        """Generator pass under this model's plan, minus any disconnected
        aligned layers. Returns (velocity, srt_out, latent_hidden)."""
        plan = self.plan.without(disconnect) if disconnect else self.plan
        srt_tokens = self.srt.tokens if self.srt is not None else None
        return gen_forward(
            self.gen, plan, self.aligners, cache, x_t, t, srt_tokens, und_heads=self.cfg.und.n_heads
        )

    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    @torch.no_grad()
    def sample(self, tokens, steps: int, generator: torch.Generator | None = None) -> torch.Tensor:
        """Euler-sample latent tokens (B, 16, 48) for captions (B, 6)."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None]
        cache = self.encode(tokens)

        def velocity(x, t, c):
            return self.forward_flow(c, x, t)[0]

        return euler_sample(
            velocity, cache, steps, generator, shape=(len(tokens), 16, 48), dtype=self.dtype
        )

    def sample_patterns(self, tokens, steps: int, generator=None) -> np.ndarray:
        return unpatchify(self.sample(tokens, steps, generator).double().numpy())


def latents_of(patterns, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(patchify(np.asarray(patterns)), dtype=dtype)
