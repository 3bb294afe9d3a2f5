"""Building blocks shared by the text encoder and the decoder backbone."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.weight * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)


def rotary_tables(head_dim: int, positions: torch.Tensor, theta: float = 10000.0, dtype=torch.float32):
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    inv_freq = 1.0 / (theta ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, L, D); rotate the two halves of the head dimension
    x1, x2 = x.chunk(2, dim=-1)
    cos = cos[None, None]
    sin = sin[None, None]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def apply_adapter(base_output: torch.Tensor, adapter: "LowRankAdapter", x: torch.Tensor) -> torch.Tensor:
    """``base_output + (alpha / r) * up(down(x))``."""
    if x.shape[-1] != adapter.down.shape[0]:
        raise ValueError(f"adapter expects input width {adapter.down.shape[0]}, got {x.shape[-1]}")
    if base_output.shape[-1] != adapter.up.shape[1]:
        raise ValueError(f"adapter produces width {adapter.up.shape[1]}, base output has {base_output.shape[-1]}")
    return base_output + adapter.scale * ((x @ adapter.down) @ adapter.up)


class LowRankAdapter(nn.Module):
    """Trainable rank-``r`` update ``(alpha / r) * up o down``; ``up`` starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int = 16, alpha: float = 16.0, target: str = ""):
        super().__init__()
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.rank = rank
        self.alpha = float(alpha)
        self.target = target
        self.down = nn.Parameter(torch.empty(d_in, rank))
        self.up = nn.Parameter(torch.zeros(rank, d_out))
        nn.init.kaiming_uniform_(self.down.T, a=math.sqrt(5))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, alpha: float, target: str = ""):
        super().__init__()
        self.base = base
        self.adapter = LowRankAdapter(base.in_features, base.out_features, rank, alpha, target)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_adapter(self.base(x), self.adapter, x)


class KVCache:
    """Per-layer key/value history for one decoding session."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.key_mask: torch.Tensor | None = None  # (B, L) bool, True = attendable
        self.length = 0

    def clone(self) -> "KVCache":
        other = KVCache(len(self.keys))
        other.keys = list(self.keys)
        other.values = list(self.values)
        other.key_mask = self.key_mask
        other.length = self.length
        return other


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, lora_rank: int = 0, lora_alpha: float = 16.0,
                 rope_theta: float = 10000.0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.rope_theta = rope_theta
        q = nn.Linear(width, width, bias=False)
        v = nn.Linear(width, width, bias=False)
        if lora_rank:
            q = LoRALinear(q, lora_rank, lora_alpha, "query")
            v = LoRALinear(v, lora_rank, lora_alpha, "value")
        self.q_proj = q
        self.k_proj = nn.Linear(width, width, bias=False)
        self.v_proj = v
        self.o_proj = nn.Linear(width, width, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, positions: torch.Tensor, attn_mask: torch.Tensor,
                past: tuple[torch.Tensor, torch.Tensor] | None = None):
        """``attn_mask``: bool (B, 1, L_new, L_total), True where attention is allowed."""
        q, k, v = self._split(self.q_proj(x)), self._split(self.k_proj(x)), self._split(self.v_proj(x))
        cos, sin = rotary_tables(self.head_dim, positions, self.rope_theta, x.dtype)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        B, H, L, D = out.shape
        return self.o_proj(out.transpose(1, 2).reshape(B, L, H * D)), (k, v)


class SwiGLU(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.gate = nn.Linear(width, hidden, bias=False)
        self.up = nn.Linear(width, hidden, bias=False)
        self.down = nn.Linear(hidden, width, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    """Pre-norm transformer block: RMSNorm, rotary self-attention, gated feed-forward."""

    def __init__(self, width: int, heads: int, ffn_width: int, lora_rank: int = 0, lora_alpha: float = 16.0):
        super().__init__()
        self.attn_norm = RMSNorm(width)
        self.attn = SelfAttention(width, heads, lora_rank, lora_alpha)
        self.ffn_norm = RMSNorm(width)
        self.ffn = SwiGLU(width, ffn_width)

    def forward(self, x, positions, attn_mask, past=None):
        h, kv = self.attn(self.attn_norm(x), positions, attn_mask, past)
        x = x + h
        x = x + self.ffn(self.ffn_norm(x))
        return x, kv
