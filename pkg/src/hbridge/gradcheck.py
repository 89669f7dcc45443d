"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

# Central differences at eps=1e-5 resolve gradients only down to ~1e-10 in
# double precision; the floor keeps sub-resolution gradients from dominating.
DENOM_FLOOR = 1e-6


@dataclass
class CoordResult:
    name: str
    role: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric), DENOM_FLOOR)
        return abs(self.analytic - self.numeric) / denom


@dataclass
class GradCheckResult:
    coords: list[CoordResult] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # frozen tensors

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.coords), default=0.0)

    def by_role(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for c in self.coords:
            out[c.role] = max(out.get(c.role, 0.0), c.rel_error)
        return out


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    *,
    coords_per_role: int = 16,
    role_of: Callable[[str], str] = lambda name: name,
    eps: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd against (L(θ+ε) − L(θ−ε)) / 2ε on sampled coordinates.

    Tensors with ``requires_grad=False`` have no analytic gradient; they are
    listed in ``skipped`` and never perturbed. Coordinates are drawn per role
    so every role contributes ``coords_per_role`` samples (round-robin over
    the tensors of that role).
    """
    result = GradCheckResult()
    live = {n: p for n, p in params.items() if p.requires_grad}
    result.skipped = sorted(n for n, p in params.items() if not p.requires_grad)
    if not live:
        return result

    names = list(live)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [live[n] for n in names], allow_unused=True)
    grad_of = {n: (g if g is not None else torch.zeros_like(live[n])) for n, g in zip(names, grads)}

    roles: dict[str, list[str]] = {}
    for n in names:
        roles.setdefault(role_of(n), []).append(n)

    rng = torch.Generator().manual_seed(seed)
    for role in sorted(roles):
        members = roles[role]
        for i in range(coords_per_role):
            name = members[i % len(members)]
            p = live[name]
            flat = int(torch.randint(0, p.numel(), (1,), generator=rng))
            idx = tuple(int(k) for k in torch.unravel_index(torch.tensor(flat), p.shape))
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss_fn().item()
                p[idx] = orig - eps
                down = loss_fn().item()
                p[idx] = orig
            result.coords.append(
                CoordResult(name, role, idx, grad_of[name][idx].item(), (up - down) / (2 * eps))
            )
    return result
