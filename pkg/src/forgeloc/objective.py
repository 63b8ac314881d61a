"""Training objective: latent matching + soft Dice."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    """Loss terms; fields are scalar tensors so ``total`` can be backpropagated."""

    lm: torch.Tensor
    loc: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {"lm": float(self.lm), "loc": float(self.loc), "total": float(self.total)}


def _pair(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not a.is_floating_point():
        a = a.to(b.dtype if b.is_floating_point() else torch.float64)
    if not b.is_floating_point():
        b = b.to(a.dtype)
    return a, b


def latent_matching_loss(z_m, z_hat) -> torch.Tensor:
    """Mean squared difference between the mask latent and the predicted latent."""
    z_m, z_hat = _pair(z_m, z_hat)
    return (z_m - z_hat).pow(2).mean()


def dice_loss(m, m_hat, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2·Σ(m∘m̂) + ε) / (Σm + Σm̂ + ε)`` over all elements."""
    m, m_hat = _pair(m, m_hat)
    inter = (m * m_hat).sum()
    return 1.0 - (2.0 * inter + eps) / (m.sum() + m_hat.sum() + eps)


def batch_dice_loss(m, m_hat, eps: float = DICE_EPS) -> torch.Tensor:
    """Per-sample soft Dice over ``(N, ...)`` tensors, averaged over the batch."""
    m, m_hat = _pair(m, m_hat)
    dims = tuple(range(1, m.dim()))
    inter = (m * m_hat).sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (m.sum(dim=dims) + m_hat.sum(dim=dims) + eps)).mean()


def total_loss(z_m, z_hat, m, m_hat, batched: bool = False) -> LossBreakdown:
    lm = latent_matching_loss(z_m, z_hat)
    loc = batch_dice_loss(m, m_hat) if batched else dice_loss(m, m_hat)
    return LossBreakdown(lm=lm, loc=loc, total=lm + loc)
