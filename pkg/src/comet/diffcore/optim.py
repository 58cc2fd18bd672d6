from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None], state: AdamState,
              lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update with L2 weight decay folded into the gradient.

    Parameters whose gradient is ``None`` are skipped (frozen or unused).
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


def step_lr(lr0: float, epoch: int, decay: float = 0.2, every: int = 15) -> float:
    """Learning rate at a 0-based ``epoch`` under a step decay schedule."""
    return lr0 * decay ** (epoch // every)
