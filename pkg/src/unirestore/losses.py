"""Training objectives for the two stages.

Stage 1 is the plain noise-estimation objective: mean absolute error between
the drawn noise and the network's prediction. Stage 2 supervises the decoder
with L1 reconstruction plus a structural term (1 - SSIM) and the expert
load-balance penalty, weighted by lambda1 / lambda2.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .experts import aux_balance_loss
from .metrics import ssim


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.01

    def __post_init__(self) -> None:
        for name, v in (("lambda1", self.lambda1), ("lambda2", self.lambda2)):
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def stage1_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return (eps - eps_hat).abs().mean()


def stage2_loss(pred: torch.Tensor, target: torch.Tensor, decisions,
                weights: LossWeights, num_experts: int = 0
                ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Composite decoder loss; returns (total, components).

    ``decisions`` is a RouterDecision (or list of them) from the expert
    module, or None when the expert path is disabled (the balance term is
    then zero).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    recon = (pred - target).abs().mean()
    structural = 1.0 - ssim(pred, target)
    if decisions is None:
        aux = torch.zeros((), dtype=pred.dtype)
    else:
        aux = aux_balance_loss(decisions, num_experts).to(pred.dtype)
    total = recon + weights.lambda1 * structural + weights.lambda2 * aux
    return total, {"recon": recon, "ssim": structural, "aux": aux}
