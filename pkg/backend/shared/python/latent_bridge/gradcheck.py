"""
Central finite-difference check of autograd gradients.
"""
import logging
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-4,
    samples: int = 24,
    seed: int = 0,
) -> float:
    """
    Compare autograd against (f(w + h) - f(w - h)) / 2h on a random subset of entries.

    Args:
        loss_fn: closure returning a scalar loss of `params` (run it in float64 for tight checks)
        params: leaf tensors with requires_grad
        step: perturbation h
        samples: entries checked per tensor (all entries if the tensor is smaller)

    Returns:
        max relative error |a - n| / max(|a| + |n|, 1e-6)
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            analytic = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            picks = np.arange(flat.numel()) if flat.numel() <= samples else rng.choice(flat.numel(), samples, replace=False)
            for i in picks:
                original = flat[i].item()
                flat[i] = original + step
                plus = float(loss_fn())
                flat[i] = original - step
                minus = float(loss_fn())
                flat[i] = original
                numeric = (plus - minus) / (2 * step)
                a = float(analytic.view(-1)[i])
                worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
    logger.debug(f"Finite-difference check: max relative error {worst:.3e}")
    return worst
