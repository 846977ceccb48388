"""Optimizer-side primitives: polynomial LR decay and gradient rescaling."""

from __future__ import annotations

import torch

from .errors import InputValidationError


def lr_at(eta0: float, i: int, i_T: int) -> float:
    """Learning rate eta0 * (1 + 10*p)^(-0.75) with p = i / i_T."""
    if eta0 <= 0:
        raise InputValidationError(f"eta0 must be positive: {eta0}")
    if i_T < 1:
        raise InputValidationError(f"total iterations must be >= 1: {i_T}")
    if not 0 <= i <= i_T:
        raise InputValidationError(f"iteration {i} outside [0, {i_T}]")
    p = i / i_T
    return eta0 * (1.0 + 10.0 * p) ** (-0.75)


def global_grad_norm(grads) -> float:
    """L2 norm of the concatenation of every gradient tensor."""
    total = 0.0
    for g in grads:
        total += float(g.detach().double().pow(2).sum())
    return total**0.5


def normalize_gradients(grads, epsilon: float = 1e-12, scope: str = "global"):
    """Rescale gradients to unit L2 norm; returns (scaled copies, pre-norm).

    scope "global": one scalar over the concatenation of all tensors, so the
    post-scaling global norm is exactly 1 (relative inter-layer magnitudes
    preserved). scope "per_tensor": each tensor scaled by its own norm.
    Norms at or below ``epsilon`` leave the gradients unchanged.
    """
    grads = list(grads)
    for g in grads:
        if not torch.isfinite(g).all():
            raise InputValidationError("non-finite gradient")
    if scope not in ("global", "per_tensor"):
        raise InputValidationError(f"unknown normalization scope: {scope}")

    if scope == "per_tensor":
        pre = global_grad_norm(grads)
        scaled = []
        for g in grads:
            norm = float(g.detach().double().norm())
            scaled.append(g / norm if norm > epsilon else g.clone())
        return scaled, pre

    pre = global_grad_norm(grads)
    if pre <= epsilon:
        return [g.clone() for g in grads], pre
    return [g / pre for g in grads], pre
