"""Decoder-only backbone over ``[text prefix | semantic tokens | delayed acoustic rows]``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .layers import Block, KVCache, RMSNorm
from .text_encoder import CharVocab, TextEncoder, TextEncoderConfig
from .vocab import TokenVocabulary, ValidationError


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    width: int = 256
    ffn_width: int = 1024
    heads: int = 4
    text_budget: int = 64
    st_at_budget: int = 512
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")

    @property
    def max_seq(self) -> int:
        return self.text_budget + self.st_at_budget

    @classmethod
    def reference(cls) -> "BackboneConfig":
        """Full-size layout: 12 x 1024 / 4096, 512 text slots + 2048 ST/AT slots."""
        return cls(layers=12, width=1024, ffn_width=4096, heads=16, text_budget=512, st_at_budget=2048)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d.pop("max_seq", None)
        return cls(**d)


def backbone_param_count(config: BackboneConfig, vocab: TokenVocabulary, text_width: int) -> int:
    """Closed-form parameter count of :class:`CodecLM`.

    embedding  rows * W, rows = (st_size + 3) + K * (at_size + 2)
    text_proj  d_txt * W + W
    per layer  4 W^2 (q, k, v, o) + 3 W F (gate, up, down) + 2 W (norms)
    final norm W
    heads      (W + 1)(st_size + 1) + K (W + 1)(at_size + 1)
    """
    W, F = config.width, config.ffn_width
    return (vocab.embedding_rows * W
            + text_width * W + W
            + config.layers * (4 * W * W + 3 * W * F + 2 * W)
            + W
            + (W + 1) * vocab.st_head_size
            + vocab.num_codebooks * (W + 1) * vocab.at_head_size)


class CodecLM(nn.Module):
    def __init__(self, vocab: TokenVocabulary, config: BackboneConfig, text_width: int):
        super().__init__()
        self.vocab = vocab
        self.config = config
        W = config.width
        self.embed = nn.Embedding(vocab.embedding_rows, W)
        self.text_proj = nn.Linear(text_width, W)
        self.blocks = nn.ModuleList(Block(W, config.heads, config.ffn_width) for _ in range(config.layers))
        self.norm = RMSNorm(W)
        self.st_head = nn.Linear(W, vocab.st_head_size)
        self.at_heads = nn.ModuleList(nn.Linear(W, vocab.at_head_size) for _ in range(vocab.num_codebooks))
        offsets = torch.tensor([vocab.codebook_offset(k) for k in range(vocab.num_codebooks)])
        self.register_buffer("at_offsets", offsets, persistent=False)

    # -- input embeddings ------------------------------------------------------

    def embed_text(self, vectors: torch.Tensor) -> torch.Tensor:
        return self.text_proj(vectors)

    def embed_st(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab.semantic_vocab):
            raise ValidationError(f"semantic id outside [0, {self.vocab.semantic_vocab})")
        return self.embed(ids)

    def embed_at(self, ids: torch.Tensor) -> torch.Tensor:
        """``ids``: (..., K) acoustic ids incl. A_fill / PAD; returns the sum of K codebook embeddings."""
        if ids.shape[-1] != self.vocab.num_codebooks:
            raise ValidationError(f"expected {self.vocab.num_codebooks} codebooks, got {ids.shape[-1]}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab.acoustic_vocab):
            raise ValidationError(f"acoustic id outside [0, {self.vocab.acoustic_vocab})")
        return self.embed(ids + self.at_offsets).sum(dim=-2)

    def embed_step(self, kind: str, payload: torch.Tensor) -> torch.Tensor:
        if kind == "text":
            return self.embed_text(payload)
        if kind == "st":
            return self.embed_st(payload)
        if kind == "at":
            return self.embed_at(payload)
        raise ValueError(f"unknown step kind {kind!r}")

    # -- transformer -----------------------------------------------------------

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None, cache: KVCache | None = None,
                causal: bool = True) -> torch.Tensor:
        """Hidden states for embedded steps ``x`` (B, L, W).

        ``key_mask`` (B, L) marks positions later steps may attend to (False for
        text PAD). With ``cache`` the steps are appended to its history and the
        cache is updated in place.
        """
        B, L, _ = x.shape
        start = cache.length if cache is not None else 0
        total = start + L
        if total > self.config.max_seq:
            raise ValidationError(f"sequence length {total} exceeds max_seq {self.config.max_seq}")
        if key_mask is None:
            key_mask = torch.ones(B, L, dtype=torch.bool)
        if cache is not None and cache.key_mask is not None:
            full_mask = torch.cat([cache.key_mask, key_mask], dim=1)
        else:
            full_mask = key_mask
        positions = torch.arange(start, total)
        attn_mask = full_mask[:, None, None, :].expand(B, 1, L, total)
        if causal:
            allowed = torch.arange(total)[None, :] <= positions[:, None]
            attn_mask = attn_mask & allowed[None, None]
        # a query must see at least itself, otherwise attention rows are NaN
        own = torch.zeros(L, total, dtype=torch.bool)
        own[torch.arange(L), positions] = True
        attn_mask = attn_mask | own[None, None]
        for i, block in enumerate(self.blocks):
            past = None
            if cache is not None and cache.keys[i] is not None:
                past = (cache.keys[i], cache.values[i])
            x, (k, v) = block(x, positions, attn_mask, past)
            if cache is not None:
                cache.keys[i], cache.values[i] = k, v
        if cache is not None:
            cache.key_mask = full_mask
            cache.length = total
        return self.norm(x)

    def new_cache(self) -> KVCache:
        return KVCache(len(self.blocks))

    def project_heads(self, hidden: torch.Tensor, region: str):
        """``st`` -> logits (..., st_size + 1); ``at`` -> logits (..., K, at_size + 1)."""
        if region == "st":
            return self.st_head(hidden)
        if region == "at":
            return torch.stack([head(hidden) for head in self.at_heads], dim=-2)
        raise ValueError(f"unknown region {region!r}")


@dataclass(frozen=True)
class ModelConfig:
    vocab: TokenVocabulary
    backbone: BackboneConfig
    text: TextEncoderConfig
    chars: CharVocab

    def to_dict(self) -> dict:
        return {"vocab": self.vocab.to_dict(), "backbone": self.backbone.to_dict(),
                "text": self.text.to_dict(), "chars": self.chars.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(TokenVocabulary.from_dict(d["vocab"]), BackboneConfig.from_dict(d["backbone"]),
                   TextEncoderConfig(**d["text"]), CharVocab.from_dict(d["chars"]))


class VoiceCloneLM(nn.Module):
    """Text encoder plus backbone: the full trainable model."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.text_encoder = TextEncoder(config.chars, config.text)
        self.lm = CodecLM(config.vocab, config.backbone, config.text.width)
        self.reset_parameters()

    def reset_parameters(self):
        for name, p in self.named_parameters():
            if name.endswith("adapter.up"):
                nn.init.zeros_(p)
            elif p.dim() >= 2:
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    @property
    def vocab(self) -> TokenVocabulary:
        return self.config.vocab

    @property
    def backbone(self) -> BackboneConfig:
        return self.config.backbone
