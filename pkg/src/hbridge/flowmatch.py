"""Rectified-flow objective (linear interpolant) and the Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import DivergenceError, InputError
from .layers import check_finite


@dataclass
class FlowBatch:
    x1: torch.Tensor
    x0: torch.Tensor
    t: torch.Tensor  # (B,)
    x_t: torch.Tensor
    v_target: torch.Tensor


def _bcast(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, *([1] * (like.dim() - 1)))


def make_flow_batch(
    x1: torch.Tensor,
    generator: torch.Generator | None = None,
    *,
    t: torch.Tensor | float | None = None,
    x0: torch.Tensor | None = None,
) -> FlowBatch:
    """Draw t ~ U(0, 1) per sample and x0 ~ N(0, I); either may be forced."""
    if not check_finite(x1):
        raise InputError("clean latents contain non-finite values")
    b = x1.shape[0]
    if t is None:
        t = torch.rand(b, generator=generator, dtype=x1.dtype)
    t = torch.as_tensor(t, dtype=x1.dtype)
    if t.dim() == 0:
        t = t.expand(b)
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    tb = _bcast(t, x1)
    return FlowBatch(x1=x1, x0=x0, t=t, x_t=(1 - tb) * x0 + tb * x1, v_target=x1 - x0)


def fm_loss(pred_v: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    if pred_v.shape != v_target.shape:
        raise InputError(f"prediction {tuple(pred_v.shape)} vs target {tuple(v_target.shape)}")
    return ((pred_v - v_target) ** 2).mean()


VelocityFn = Callable[[torch.Tensor, float, object], torch.Tensor]


@torch.no_grad()
def euler_sample(
    velocity: VelocityFn,
    cond,
    steps: int,
    generator: torch.Generator | None = None,
    *,
    shape: tuple[int, ...] | None = None,
    x0: torch.Tensor | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Integrate dx/dt = velocity(x, t, cond) from t=0 to t=1 with ``steps`` Euler steps.

    The start point is ``x0`` if given, else N(0, I) of ``shape`` drawn from
    ``generator``.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    if x0 is None:
        if shape is None:
            raise InputError("need either x0 or shape")
        x0 = torch.randn(shape, generator=generator, dtype=dtype)
    x = x0.clone()
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity(x, k / steps, cond)
        if not check_finite(x):
            raise DivergenceError(k, "sampler state")
    return x
