"""AdamW with decoupled weight decay that refuses to touch frozen tensors."""

from __future__ import annotations

import torch
from torch.optim import Optimizer

from .errors import FrozenTensorUpdateError


class AdamW(Optimizer):
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        for group in self.param_groups:
            for p in group["params"]:
                if not p.requires_grad:
                    raise FrozenTensorUpdateError("frozen tensor handed to the optimizer")

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd = group["lr"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if not p.requires_grad:
                    raise FrozenTensorUpdateError("optimizer step on a frozen tensor")
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                if lr == 0:
                    continue
                p.mul_(1 - lr * wd)
                step_size = lr / (1 - beta1**t)
                denom = (v / (1 - beta2**t)).sqrt_().add_(eps)
                p.addcdiv_(m, denom, value=-step_size)
        return loss
