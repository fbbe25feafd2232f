"""Degradation-aware feature fusion.

Two attention stages align low-quality conditioning features with the noisy
latent at every diffusion step:

* a double-stream block keeps the two feature maps in separate branches
  (each with its own normalization, timestep modulation, and QKV projection)
  but lets their tokens attend jointly, projecting the result back through
  zero-initialized per-branch gates;
* a single-stream block channel-concatenates the gated branches, runs one
  more joint attention with an auxiliary GELU path, and adds the result
  through a learned per-channel gate ``g`` (zero at init, so the block starts
  as the identity).

A lightweight cross-attention then mixes in a content embedding derived from
a small task-tag vocabulary. Attention logits carry an additive 2D sinusoidal
position bias and are scaled by 1/sqrt(head_dim).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TASK_TAGS = ("none", "denoise", "derain", "dehaze", "deblur", "lowlight")


@dataclass
class FusionState:
    """Intermediate tensors of one fusion pass (gates applied, pre content-attention)."""

    gated_lq: torch.Tensor
    gated_hq: torch.Tensor
    f_cat: torch.Tensor
    f_align: torch.Tensor
    gate_values: torch.Tensor


@dataclass(frozen=True)
class AttentionConfig:
    """Head geometry for the fusion attention blocks (width = head_dim * num_heads)."""

    head_dim: int
    num_heads: int = 1
    pe_kind: str = "sinusoidal_2d"

    @property
    def width(self) -> int:
        return self.head_dim * self.num_heads

    def __post_init__(self) -> None:
        if self.head_dim < 1 or self.num_heads < 1:
            raise ValueError("head_dim and num_heads must be positive")
        if self.pe_kind != "sinusoidal_2d":
            raise ValueError(f"unsupported positional embedding kind {self.pe_kind!r}")


def sinusoid_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding table, layout [sin .. sin | cos .. cos]."""
    if dim < 1:
        raise ValueError("embedding dim must be >= 1")
    half = (dim + 1) // 2
    dtype = positions.dtype if positions.is_floating_point() else torch.get_default_dtype()
    positions = positions.to(dtype)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    args = positions[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args[:, : dim - half])], dim=-1)


def embed_timestep(t: int, width: int) -> torch.Tensor:
    """Deterministic sinusoidal embedding of a single step index."""
    return sinusoid_table(torch.tensor([float(t)]), width)[0]


def embed_timesteps(ts: torch.Tensor, width: int) -> torch.Tensor:
    """Batched version of :func:`embed_timestep`; ``ts`` has shape (B,)."""
    return sinusoid_table(ts.to(torch.get_default_dtype()), width)


def position_bias(h: int, w: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive attention-logit bias from 2D sinusoidal token coordinates.

    Each token at (row, col) gets an embedding [sin/cos(row) | sin/cos(col)]
    of size ``dim``; the bias is the Gram matrix of those embeddings, shape
    (h*w, h*w).
    """
    rows = torch.arange(h, dtype=dtype).repeat_interleave(w)
    cols = torch.arange(w, dtype=dtype).repeat(h)
    row_dim = dim // 2
    col_dim = dim - row_dim
    emb = torch.cat([sinusoid_table(rows, row_dim), sinusoid_table(cols, col_dim)], dim=-1)
    return (emb @ emb.T).to(dtype)


def scaled_logits(q: torch.Tensor, k: torch.Tensor, pe: torch.Tensor | float,
                  head_dim: int) -> torch.Tensor:
    """Attention logits (q k^T + pe) / sqrt(head_dim)."""
    return (q @ k.transpose(-2, -1) + pe) / math.sqrt(head_dim)


def joint_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                    pe: torch.Tensor | float, head_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax attention over token sequences; returns (output, weights)."""
    weights = torch.softmax(scaled_logits(q, k, pe, head_dim), dim=-1)
    return weights @ v, weights


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)  # (B, C, H, W) -> (B, N, C)


def _spatial(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, num_heads, c // num_heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, nh, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, nh * dh)


class TimestepModulation(nn.Module):
    """Zero-initialized scale/shift regression from the timestep embedding."""

    def __init__(self, time_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(time_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, t_emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if t_emb.dim() == 1:
            t_emb = t_emb[None]
        scale, shift = self.proj(t_emb).chunk(2, dim=-1)
        return scale[:, None, :], shift[:, None, :]


class DoubleStreamBlock(nn.Module):
    """Joint attention over two branches that keep separate parameters."""

    def __init__(self, channels: int, num_heads: int = 1, time_dim: int = 32):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.norm = nn.LayerNorm(channels, elementwise_affine=False)
        self.mod_lq = TimestepModulation(time_dim, channels)
        self.mod_hq = TimestepModulation(time_dim, channels)
        self.qkv_lq = nn.Linear(channels, 3 * channels)
        self.qkv_hq = nn.Linear(channels, 3 * channels)
        self.proj_lq = nn.Linear(channels, channels)
        self.proj_hq = nn.Linear(channels, channels)
        self.gate_lq = nn.Parameter(torch.zeros(channels))
        self.gate_hq = nn.Parameter(torch.zeros(channels))
        nn.init.zeros_(self.proj_lq.weight)
        nn.init.zeros_(self.proj_lq.bias)
        nn.init.zeros_(self.proj_hq.weight)
        nn.init.zeros_(self.proj_hq.bias)

    def _branch_qkv(self, x: torch.Tensor, mod: TimestepModulation, qkv: nn.Linear,
                    t_emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        scale, shift = mod(t_emb)
        h = self.norm(x) * (1 + scale) + shift
        q, k, v = qkv(h).chunk(3, dim=-1)
        return (_split_heads(q, self.num_heads), _split_heads(k, self.num_heads),
                _split_heads(v, self.num_heads))

    def forward(self, f_lq: torch.Tensor, x_t: torch.Tensor,
                t_emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if f_lq.shape != x_t.shape:
            raise ValueError(f"stream shapes differ: {tuple(f_lq.shape)} vs {tuple(x_t.shape)}")
        b, c, h, w = x_t.shape
        n = h * w
        lq_tok, hq_tok = _tokens(f_lq), _tokens(x_t)
        q_l, k_l, v_l = self._branch_qkv(lq_tok, self.mod_lq, self.qkv_lq, t_emb)
        q_h, k_h, v_h = self._branch_qkv(hq_tok, self.mod_hq, self.qkv_hq, t_emb)
        q = torch.cat([q_l, q_h], dim=2)
        k = torch.cat([k_l, k_h], dim=2)
        v = torch.cat([v_l, v_h], dim=2)
        pe = position_bias(h, w, self.head_dim, x_t.dtype).repeat(2, 2)
        out, _ = joint_attention(q, k, v, pe, self.head_dim)
        out = _merge_heads(out)
        gated_lq = lq_tok + self.gate_lq * self.proj_lq(out[:, :n])
        gated_hq = hq_tok + self.gate_hq * self.proj_hq(out[:, n:])
        return _spatial(gated_lq, h, w), _spatial(gated_hq, h, w)


class SingleStreamBlock(nn.Module):
    """Attention over the channel-concatenated streams with a gated residual.

    One linear layer emits the QKV triplet plus an auxiliary vector M; the
    attention output and GELU(M) are concatenated and projected back, then
    added through the per-channel gate ``g`` (zero at init).
    """

    def __init__(self, channels: int, num_heads: int = 1, time_dim: int = 32,
                 aux_dim: int | None = None):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.aux_dim = 2 * channels if aux_dim is None else aux_dim
        self.norm = nn.LayerNorm(channels, elementwise_affine=False)
        self.mod = TimestepModulation(time_dim, channels)
        self.linear1 = nn.Linear(channels, 3 * channels + self.aux_dim)
        self.linear2 = nn.Linear(channels + self.aux_dim, channels)
        self.gate = nn.Parameter(torch.zeros(channels))

    def forward(self, f_cat: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f_cat.shape
        tok = _tokens(f_cat)
        scale, shift = self.mod(t_emb)
        normed = self.norm(tok) * (1 + scale) + shift
        packed = self.linear1(normed)
        q, k, v = packed[..., : 3 * c].chunk(3, dim=-1)
        m = packed[..., 3 * c:]
        pe = position_bias(h, w, self.head_dim, f_cat.dtype)
        out, _ = joint_attention(_split_heads(q, self.num_heads), _split_heads(k, self.num_heads),
                                 _split_heads(v, self.num_heads), pe, self.head_dim)
        mixed = self.linear2(torch.cat([_merge_heads(out), F.gelu(m)], dim=-1))
        aligned = tok + self.gate * mixed
        return _spatial(aligned, h, w)

    def fuse(self, gated_lq: torch.Tensor, gated_hq: torch.Tensor,
             t_emb: torch.Tensor) -> FusionState:
        f_cat = torch.cat([gated_lq, gated_hq], dim=1)
        f_align = self.forward(f_cat, t_emb)
        return FusionState(gated_lq=gated_lq, gated_hq=gated_hq, f_cat=f_cat,
                           f_align=f_align, gate_values=self.gate)


class ContentCrossAttention(nn.Module):
    """Single-head cross-attention from spatial tokens onto content tokens.

    The output projection feeds a zero-initialized per-channel gate, so the
    block is the identity at init.
    """

    def __init__(self, query_channels: int, content_dim: int, attn_dim: int | None = None):
        super().__init__()
        self.attn_dim = query_channels if attn_dim is None else attn_dim
        self.wq = nn.Linear(query_channels, self.attn_dim)
        self.wk = nn.Linear(content_dim, self.attn_dim)
        self.wv = nn.Linear(content_dim, self.attn_dim)
        self.proj = nn.Linear(self.attn_dim, query_channels)
        self.gate = nn.Parameter(torch.zeros(query_channels))
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if x.shape[0] != c.shape[0]:
            raise ValueError(f"batch mismatch: features {x.shape[0]} vs content {c.shape[0]}")
        spatial = x.dim() == 4
        if spatial:
            b, ch, h, w = x.shape
            tok = _tokens(x)
        else:
            tok = x
        q = self.wq(tok)
        k = self.wk(c)
        v = self.wv(c)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.attn_dim), dim=-1)
        self.last_weights = weights.detach()
        out = tok + self.gate * self.proj(weights @ v)
        return _spatial(out, h, w) if spatial else out


class TaskTagEmbedding(nn.Module):
    """Learned lookup over the small task-tag vocabulary; one token per image.

    Unknown tags (composites have no single-task name) map to "none".
    """

    def __init__(self, content_dim: int):
        super().__init__()
        self.content_dim = content_dim
        self.table = nn.Embedding(len(TASK_TAGS), content_dim)

    @staticmethod
    def tag_index(tag: str) -> int:
        return TASK_TAGS.index(tag) if tag in TASK_TAGS else 0

    def forward(self, tags) -> torch.Tensor:
        if isinstance(tags, torch.Tensor):
            idx = tags.long()
        else:
            idx = torch.tensor([self.tag_index(t) for t in tags], dtype=torch.long)
        return self.table(idx)[:, None, :]


class DegradationFusion(nn.Module):
    """Full fusion stack: double-stream block(s), single-stream block(s), and
    content cross-attention. ``use_double`` / ``use_single`` carve out the
    ablation variants that keep only one pathway.
    """

    def __init__(self, channels: int, num_heads: int = 1, time_dim: int = 32,
                 blocks: int = 1, content_dim: int = 16,
                 use_double: bool = True, use_single: bool = True):
        super().__init__()
        if blocks < 1:
            raise ValueError("need at least one fusion block")
        self.channels = channels
        self.double_blocks = nn.ModuleList(
            [DoubleStreamBlock(channels, num_heads, time_dim) for _ in range(blocks)]
            if use_double else [])
        self.single_blocks = nn.ModuleList(
            [SingleStreamBlock(2 * channels, num_heads, time_dim) for _ in range(blocks)]
            if use_single else [])
        self.content_attn = ContentCrossAttention(2 * channels, content_dim)
        self.last_state: FusionState | None = None

    @property
    def out_channels(self) -> int:
        return 2 * self.channels

    def forward(self, f_lq: torch.Tensor, x_t: torch.Tensor, t_emb: torch.Tensor,
                c: torch.Tensor | None = None) -> torch.Tensor:
        lq, hq = f_lq, x_t
        for block in self.double_blocks:
            lq, hq = block(lq, hq, t_emb)
        f_cat = torch.cat([lq, hq], dim=1)
        f = f_cat
        for block in self.single_blocks:
            f = block(f, t_emb)
        gate = self.single_blocks[-1].gate if len(self.single_blocks) else torch.zeros(0)
        self.last_state = FusionState(gated_lq=lq, gated_hq=hq, f_cat=f_cat,
                                      f_align=f, gate_values=gate)
        if c is not None:
            f = self.content_attn(f, c)
        return f


class SelfAttentionFusion(nn.Module):
    """Residual self-attention baseline: one standard attention block over the
    channel-concatenated pair, with no timestep modulation."""

    def __init__(self, channels: int, num_heads: int = 1):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, f_lq: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
        x = torch.cat([f_lq, x_t], dim=1)
        b, c, h, w = x.shape
        tok = _tokens(x)
        q, k, v = self.qkv(self.norm(tok)).chunk(3, dim=-1)
        out, _ = joint_attention(_split_heads(q, self.num_heads), _split_heads(k, self.num_heads),
                                 _split_heads(v, self.num_heads), 0.0, self.head_dim)
        return _spatial(tok + self.proj(_merge_heads(out)), h, w)
