"""Character-level text encoder producing the conditioning prefix.

Normalization rule (stable, applied before tokenization): strip leading and
trailing whitespace, then collapse every internal whitespace run to a single
ASCII space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import nn

from .layers import Block, LowRankAdapter, RMSNorm

_WS = re.compile(r"\s+")

PAD_CHAR_ID = 0
UNK_CHAR_ID = 1


def normalize_text(text: str) -> str:
    return _WS.sub(" ", text.strip())


class BudgetError(ValueError):
    """A component does not fit the sequence budget."""


@dataclass(frozen=True)
class CharVocab:
    """Character ids: 0 = PAD, 1 = UNK, then ``chars`` in order."""

    chars: tuple[str, ...]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CharVocab":
        seen = sorted({c for t in texts for c in normalize_text(t)})
        return cls(tuple(seen))

    def __len__(self) -> int:
        return len(self.chars) + 2

    def encode(self, text: str) -> list[int]:
        lookup = {c: i + 2 for i, c in enumerate(self.chars)}
        return [lookup.get(c, UNK_CHAR_ID) for c in normalize_text(text)]

    def to_dict(self) -> dict:
        return {"chars": "".join(self.chars)}

    @classmethod
    def from_dict(cls, d: dict) -> "CharVocab":
        return cls(tuple(d["chars"]))


@dataclass
class TextEncoding:
    vectors: torch.Tensor  # (padded_length, d); rows >= m are zero
    mask: torch.Tensor  # (padded_length,) bool, True for the m real positions
    padded_length: int

    @property
    def m(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class TextEncoderConfig:
    width: int = 256
    layers: int = 2
    heads: int = 4
    ffn_width: int = 512
    lora_rank: int = 16
    lora_alpha: float = 16.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class TextEncoder(nn.Module):
    """Bidirectional self-attention over characters, with adapters on the q/v projections."""

    def __init__(self, char_vocab: CharVocab, config: TextEncoderConfig = TextEncoderConfig()):
        super().__init__()
        self.char_vocab = char_vocab
        self.config = config
        self.embed = nn.Embedding(len(char_vocab), config.width)
        self.blocks = nn.ModuleList(
            Block(config.width, config.heads, config.ffn_width, config.lora_rank, config.lora_alpha)
            for _ in range(config.layers))
        self.norm = RMSNorm(config.width)
        self.null = nn.Parameter(torch.zeros(config.width))
        nn.init.normal_(self.null, std=0.02)

    @property
    def width(self) -> int:
        return self.config.width

    def tokenize(self, text: str, budget: int) -> list[int]:
        ids = self.char_vocab.encode(text)
        if not ids:
            raise ValueError("text is empty after normalization")
        if len(ids) > budget:
            raise BudgetError(
                f"text has {len(ids)} characters but the text budget is {budget}; "
                "segment it first (segment_text)")
        return ids

    def forward(self, char_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Encode a padded batch. ``char_ids``/``mask``: (B, L). Returns (B, L, d), pads zeroed."""
        x = self.embed(char_ids)
        L = char_ids.shape[1]
        positions = torch.arange(L)
        attn_mask = mask[:, None, None, :].expand(-1, 1, L, -1)
        for block in self.blocks:
            x, _ = block(x, positions, attn_mask)
        x = self.norm(x)
        return x * mask[..., None].to(x.dtype)

    def encode_batch(self, texts: Sequence[str], budget: int) -> tuple[torch.Tensor, torch.Tensor]:
        toks = [self.tokenize(t, budget) for t in texts]
        # pad keys are masked, so encoding only up to the longest text is exact
        L = max(len(t) for t in toks)
        ids = torch.full((len(texts), L), PAD_CHAR_ID, dtype=torch.long)
        mask = torch.zeros(len(texts), budget, dtype=torch.bool)
        for i, tok in enumerate(toks):
            ids[i, :len(tok)] = torch.tensor(tok)
            mask[i, :len(tok)] = True
        enc = self(ids, mask[:, :L])
        out = enc.new_zeros(len(texts), budget, enc.shape[-1])
        out[:, :L] = enc
        return out, mask

    def encode_text(self, text: str, budget: int) -> TextEncoding:
        vectors, mask = self.encode_batch([text], budget)
        return TextEncoding(vectors[0], mask[0], budget)

    def null_condition(self, budget: int) -> TextEncoding:
        vectors = self.null[None, :].expand(budget, -1)
        return TextEncoding(vectors, torch.ones(budget, dtype=torch.bool), budget)

    def adapters(self) -> list[LowRankAdapter]:
        return [m for m in self.modules() if isinstance(m, LowRankAdapter)]
