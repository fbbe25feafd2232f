"""Detail refinement through sparsely routed expert branches.

A lightweight router computes ``top-k(softmax(W x + xi))`` per spatial token
(``xi`` is Gaussian exploration noise, active only in training). Each expert
is a small NAF-style convolution stack with its own kernel size, so experts
see different receptive fields; a shared branch applies transposed
self-attention (a C x C attention matrix over channels). The selected
expert's output, scaled by its gate, is multiplied element-wise with the
shared-branch output and residual-added to the input. Expert output
projections start at zero, making the whole module the identity at init.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class RouterConfig:
    """Routing hyperparameters; ties break toward the lowest expert index."""

    num_experts: int
    k: int = 1
    noise_std: float = 0.0

    def __post_init__(self) -> None:
        if self.num_experts < 2:
            raise ValueError("need at least two experts")
        if not 1 <= self.k <= self.num_experts:
            raise ValueError(f"k must be in [1, {self.num_experts}], got {self.k}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class RouterDecision:
    """Per-token routing outcome.

    ``indices``/``gates`` have a trailing k axis; ``distribution`` holds the
    full softmax over experts. For k=1 the gate is the raw softmax mass of
    the chosen expert; for k>1 gates are renormalized over the selection.
    """

    indices: torch.Tensor
    gates: torch.Tensor
    distribution: torch.Tensor

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    @property
    def expert_index(self) -> torch.Tensor:
        return self.indices[..., 0] if self.k == 1 else self.indices

    @property
    def gate(self) -> torch.Tensor:
        return self.gates[..., 0] if self.k == 1 else self.gates

    def num_tokens(self) -> int:
        return self.indices[..., 0].numel()


def route(x: torch.Tensor, cfg: RouterConfig, weight: torch.Tensor,
          noise: torch.Tensor | None = None,
          generator: torch.Generator | None = None) -> RouterDecision:
    """Route per-token feature vectors ``x`` (..., C) with router weight (N, C).

    ``noise`` supplies an explicit xi; otherwise it is drawn from
    N(0, noise_std^2) when noise_std > 0 (seeded via ``generator``).
    """
    logits = x @ weight.T
    if noise is not None:
        logits = logits + noise
    elif cfg.noise_std > 0:
        xi = torch.randn(logits.shape, generator=generator, dtype=logits.dtype,
                         device=logits.device)
        logits = logits + cfg.noise_std * xi
    if not torch.isfinite(logits).all():
        raise ValueError("router logits contain non-finite values")
    probs = torch.softmax(logits, dim=-1)
    # Stable sort on descending probability keeps the lowest index first on ties.
    order = torch.argsort(-probs.detach(), dim=-1, stable=True)
    indices = order[..., : cfg.k]
    gates = probs.gather(-1, indices)
    if cfg.k > 1:
        gates = gates / gates.sum(dim=-1, keepdim=True)
    return RouterDecision(indices=indices, gates=gates, distribution=probs)


def aux_balance_loss(decisions, num_experts: int) -> torch.Tensor:
    """Load-balance penalty N * sum_i f_i P_i.

    ``f_i`` is the fraction of routed selections assigned to expert i (hard
    counts, no gradient); ``P_i`` is the mean softmax probability of expert i
    over tokens. Uniform routing gives exactly 1.0; full collapse gives N.
    """
    if isinstance(decisions, RouterDecision):
        decisions = [decisions]
    if not decisions:
        raise ValueError("need at least one routing decision")
    counts = torch.zeros(num_experts, dtype=torch.float64)
    prob_sum = None
    token_total = 0
    for d in decisions:
        idx = d.indices.reshape(-1)
        counts += torch.bincount(idx, minlength=num_experts).to(torch.float64)
        flat = d.distribution.reshape(-1, num_experts)
        token_total += flat.shape[0]
        s = flat.sum(dim=0)
        prob_sum = s if prob_sum is None else prob_sum + s
    frac = (counts / counts.sum()).to(prob_sum.dtype)
    mean_prob = prob_sum / token_total
    return num_experts * (frac * mean_prob).sum()


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (B, C, H, W) maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class NafBlock(nn.Module):
    """Lightweight NAF-style block: pointwise expand, depthwise conv of the
    given kernel size, simple gate, channel attention, pointwise project,
    with a zero-initialized residual scale."""

    def __init__(self, channels: int, kernel_size: int, expansion: int = 2):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        hidden = channels * expansion
        self.norm = ChannelLayerNorm(channels)
        self.expand = nn.Conv2d(channels, 2 * hidden, 1)
        self.dwconv = nn.Conv2d(2 * hidden, 2 * hidden, kernel_size,
                                padding=kernel_size // 2, groups=2 * hidden)
        self.sca_pool = nn.AdaptiveAvgPool2d(1)
        self.sca_conv = nn.Conv2d(hidden, hidden, 1)
        self.project = nn.Conv2d(hidden, channels, 1)
        self.scale = nn.Parameter(torch.zeros(channels, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.dwconv(self.expand(self.norm(x)))
        a, b = h.chunk(2, dim=1)
        h = a * b
        h = h * self.sca_conv(self.sca_pool(h))
        return x + self.scale * self.project(h)


class ExpertBranch(nn.Module):
    """One expert: NAF blocks at a fixed kernel size, then a zero-initialized
    1x1 output projection (so E(x) = 0 at init)."""

    def __init__(self, channels: int, kernel_size: int, depth: int = 1):
        super().__init__()
        self.kernel_size = kernel_size
        self.blocks = nn.Sequential(*[NafBlock(channels, kernel_size) for _ in range(depth)])
        self.out_proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.blocks(x))


class TransposedSelfAttention(nn.Module):
    """Channel-wise attention: Q, K, V via 1x1 convs, a C x C attention matrix
    from spatially flattened features (softmax over channels, scaled by
    1/sqrt(H*W)), projected and residual-added."""

    def __init__(self, channels: int):
        super().__init__()
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.project = nn.Conv2d(channels, channels, 1)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).flatten(2).chunk(3, dim=1)  # each (B, C, H*W)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(h * w), dim=-1)
        self.last_weights = attn.detach()
        out = (attn @ v).reshape(b, c, h, w)
        return self.project(out) + x


class DetailExpertModule(nn.Module):
    """Router + expert pool + shared branch with multiplicative fusion.

    Output is ``x + gate * (E_i(x) * S(x))`` per token, where i is the routed
    expert. Routing noise follows ``self.training``; pass ``generator`` for
    reproducible draws.
    """

    def __init__(self, channels: int, router_cfg: RouterConfig,
                 kernel_sizes: tuple[int, ...] = (3, 5, 7, 9), depth: int = 1):
        super().__init__()
        if len(kernel_sizes) != router_cfg.num_experts:
            raise ValueError(f"{router_cfg.num_experts} experts need "
                             f"{router_cfg.num_experts} kernel sizes, got {kernel_sizes}")
        if len(set(kernel_sizes)) != len(kernel_sizes):
            raise ValueError("expert kernel sizes must be distinct")
        self.cfg = router_cfg
        self.router_weight = nn.Parameter(torch.empty(router_cfg.num_experts, channels))
        nn.init.normal_(self.router_weight, std=0.02)
        self.experts = nn.ModuleList(
            [ExpertBranch(channels, k, depth) for k in kernel_sizes])
        self.shared = TransposedSelfAttention(channels)

    def route_tokens(self, x: torch.Tensor, noise: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> RouterDecision:
        tokens = x.permute(0, 2, 3, 1)  # (B, H, W, C)
        cfg = self.cfg if self.training else RouterConfig(
            self.cfg.num_experts, self.cfg.k, noise_std=0.0)
        return route(tokens, cfg, self.router_weight, noise=noise, generator=generator)

    def combine(self, x: torch.Tensor, decision: RouterDecision) -> torch.Tensor:
        """Apply a precomputed routing decision to ``x``."""
        n = self.cfg.num_experts
        if int(decision.indices.max()) >= n:
            raise ValueError("routing decision references an unknown expert")
        shared_out = self.shared(x)
        expert_mix = torch.zeros_like(x)
        for i, expert in enumerate(self.experts):
            # Per-token weight of expert i summed over the k selection slots.
            weight_i = (decision.gates * (decision.indices == i)).sum(dim=-1)
            if not bool((decision.indices == i).any()):
                continue
            expert_mix = expert_mix + weight_i.unsqueeze(1) * expert(x)
        return x + expert_mix * shared_out

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None,
                generator: torch.Generator | None = None
                ) -> tuple[torch.Tensor, RouterDecision]:
        decision = self.route_tokens(x, noise=noise, generator=generator)
        return self.combine(x, decision), decision


class DetailExpertStack(nn.Module):
    """One expert module per skip-bearing decoder stage, coarsest first.

    The decoder owning this stack records the routing decisions of its most
    recent forward pass in ``last_decisions``.
    """

    def __init__(self, stage_channels, router_cfg: RouterConfig,
                 kernel_sizes: tuple[int, ...] = (3, 5, 7, 9), depth: int = 1):
        super().__init__()
        self.cfg = router_cfg
        self.stages = nn.ModuleList(
            [DetailExpertModule(c, router_cfg, kernel_sizes, depth) for c in stage_channels])
        self.last_decisions: list[RouterDecision] = []

    def refine(self, stage_idx: int, x: torch.Tensor,
               generator: torch.Generator | None = None) -> torch.Tensor:
        out, decision = self.stages[stage_idx](x, generator=generator)
        self.last_decisions.append(decision)
        return out

    def utilization(self) -> torch.Tensor:
        return utilization(self.last_decisions, self.cfg.num_experts)


def utilization(decisions, num_experts: int) -> torch.Tensor:
    """Fraction of routed selections per expert, shape (num_experts,)."""
    if isinstance(decisions, RouterDecision):
        decisions = [decisions]
    counts = torch.zeros(num_experts, dtype=torch.float64)
    for d in decisions:
        counts += torch.bincount(d.indices.reshape(-1), minlength=num_experts).to(torch.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("no routing decisions to aggregate")
    return counts / total
