"""Central finite-difference checks of autograd gradients (double precision)."""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np
import torch

from .errors import NumericalError


# Tensors with an identically zero gradient (a key bias under softmax, for
# instance) would otherwise compare FD noise against noise; their scale is
# floored at this fraction of the largest gradient in the same check.
RELATIVE_FLOOR = 1e-3


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-12) -> float:
    # infinity-norm error scaled by the larger gradient magnitude of the tensor
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def max_relative_error(
    fn: Callable[[], torch.Tensor],
    tensors: Dict[str, torch.Tensor],
    epsilon: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare d fn()/d t with central differences for every tensor in ``tensors``.

    ``fn`` must return a scalar and read the tensors by reference; they are
    perturbed in place and restored. With ``max_coords`` only a seeded random
    subset of coordinates per tensor is probed.
    """
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None
    out = fn()
    if not torch.isfinite(out):
        raise NumericalError(f"non-finite objective {out.item()}")
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    pairs = []
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            if not torch.isfinite(g).all():
                raise NumericalError(f"non-finite analytic gradient for {name}")
            flat = t.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = np.sort(rng.choice(flat.numel(), size=max_coords, replace=False))
            numeric = torch.empty(len(idx), dtype=t.dtype)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                fp = fn().item()
                flat[i] = orig - epsilon
                fm = fn().item()
                flat[i] = orig
                numeric[j] = (fp - fm) / (2 * epsilon)
            if not torch.isfinite(numeric).all():
                raise NumericalError(f"non-finite finite difference for {name}")
            pairs.append((g.reshape(-1)[idx], numeric))
    top = max((max(a.abs().max().item(), n.abs().max().item()) for a, n in pairs if a.numel()), default=0.0)
    floor = max(RELATIVE_FLOOR * top, 1e-12)
    return max((_rel_error(a, n, floor) for a, n in pairs), default=0.0)


def directional_relative_error(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    n_directions: int = 4,
    seed: int = 0,
) -> float:
    """Relative error of autograd directional derivatives along random unit directions.

    Used for whole networks where probing every coordinate is too slow.
    """
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
    out = fn()
    if not torch.isfinite(out):
        raise NumericalError(f"non-finite objective {out.item()}")
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_directions):
            dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
            norm = torch.sqrt(sum((d * d).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = sum(
                (g * d).sum().item() for g, d in zip(grads, dirs) if g is not None
            )
            for t, d in zip(tensors, dirs):
                t.add_(d, alpha=epsilon)
            fp = fn().item()
            for t, d in zip(tensors, dirs):
                t.add_(d, alpha=-2 * epsilon)
            fm = fn().item()
            for t, d in zip(tensors, dirs):
                t.add_(d, alpha=epsilon)
            numeric = (fp - fm) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise NumericalError("non-finite finite difference")
            scale = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def network_backward_check(model, t1, t2, target, epsilon: float = 1e-5,
                           n_directions: int = 8, seed: int = 0) -> float:
    """Whole-network check of the hybrid loss of ``model(t1, t2)`` in double precision.

    Probes random joint directions over both inputs and every parameter.
    """
    from .losses import hybrid_loss
    from .temporal_fusion import _double_copy

    model = _double_copy(model)
    t1 = t1.detach().double().clone()
    t2 = t2.detach().double().clone()

    def objective():
        return hybrid_loss(model(t1, t2), target)

    tensors = {"t1": t1, "t2": t2}
    tensors.update(dict(model.named_parameters()))
    return directional_relative_error(objective, list(tensors.values()), epsilon, n_directions, seed)
