"""Sequence assembly, condition dropout, weighted loss and the optimisation loop.

Sequence layout (positions are 0-based, ``B`` = text budget)::

    [0, B)                 text prefix (PAD-masked beyond the text length)
    [B, B + n_st)          semantic ids followed by S_eos
    [B + n_st, ...)        delayed acoustic rows (T + K - 1 of them)

Position ``p`` predicts the token at ``p + 1``; the last acoustic row also
predicts one extra all-fill row. Acoustic loss covers data cells plus the
single end-of-audio cell (head 0 at row ``T``); every other fill, PAD, text
position and dropped region is excluded.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .delay import DelayedGrid, apply_delay, fill_mask
from .model import BackboneConfig, VoiceCloneLM
from .seeding import numpy_rng
from .text_encoder import BudgetError, CharVocab, normalize_text
from .vocab import AcousticGrid, SemanticStream, TokenVocabulary, dedup_consecutive

IGNORE = -100
REFERENCE_LOSS_WEIGHTS = (5.0, 2.0, 1.0, 0.5, 0.5, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1)


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if not self.alpha or any(not a > 0 for a in self.alpha):
            raise ValueError("loss weights must be positive")

    @classmethod
    def for_codebooks(cls, K: int) -> "LossWeights":
        """The 12-entry list truncated to the first K codebooks."""
        if K > len(REFERENCE_LOSS_WEIGHTS):
            raise ValueError(f"no default weights for K={K}; pass them explicitly")
        return cls(REFERENCE_LOSS_WEIGHTS[:K])


@dataclass(frozen=True)
class TrainingExample:
    text: str
    char_ids: tuple[int, ...]
    st: SemanticStream
    delayed: DelayedGrid
    vocab: TokenVocabulary
    text_budget: int
    drop_text: bool = False
    drop_st: bool = False

    @property
    def st_ids(self) -> list[int]:
        return self.st.with_eos(self.vocab)

    @property
    def n_st(self) -> int:
        return len(self.st_ids)

    @property
    def n_rows(self) -> int:
        return self.delayed.rows

    @property
    def length(self) -> int:
        return self.text_budget + self.n_st + self.n_rows

    def input_st(self) -> list[int]:
        if self.drop_st:
            return [self.vocab.st_null] * self.n_st
        return self.st_ids

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-position targets ``(st (L,), at (L, K))``; IGNORE marks excluded cells."""
        L, B, K = self.length, self.text_budget, self.vocab.num_codebooks
        st_t = np.full(L, IGNORE, dtype=np.int64)
        at_t = np.full((L, K), IGNORE, dtype=np.int64)
        if not self.drop_st:
            st_t[B - 1:B - 1 + self.n_st] = self.st_ids
        T = self.delayed.source_T
        rows = np.vstack([self.delayed.tokens, np.full((1, K), self.vocab.a_fill)])
        mask = ~np.vstack([fill_mask(T, K), np.ones((1, K), dtype=bool)])
        if T > 0:
            mask[T, 0] = True  # end-of-audio signal on head 0
        rows = np.where(mask, rows, IGNORE)
        start = B + self.n_st - 1
        at_t[start:start + rows.shape[0]] = rows
        return st_t, at_t

    def loss_mask(self) -> np.ndarray:
        """(L, 1 + K) flags: column 0 for the semantic head, then one per acoustic head."""
        st_t, at_t = self.targets()
        return np.concatenate([(st_t != IGNORE)[:, None], at_t != IGNORE], axis=1)


def assemble_example(text: str, st_raw: Sequence[int], at_grid: AcousticGrid | np.ndarray,
                     vocab: TokenVocabulary, config: BackboneConfig, chars: CharVocab) -> TrainingExample:
    text = normalize_text(text)
    char_ids = chars.encode(text)
    if not char_ids:
        raise ValueError("text is empty after normalization")
    if len(char_ids) > config.text_budget:
        raise BudgetError(f"text: {len(char_ids)} characters exceed the text budget {config.text_budget}")
    st = dedup_consecutive(st_raw, vocab)
    st = SemanticStream(st.tokens, terminated=True)
    delayed = apply_delay(at_grid, vocab)
    n = len(st) + 1 + delayed.rows
    if n > config.st_at_budget:
        raise BudgetError(
            f"semantic+acoustic: {len(st) + 1} semantic + {delayed.rows} delayed acoustic positions = {n} "
            f"exceed the budget {config.st_at_budget}")
    return TrainingExample(text, tuple(char_ids), st, delayed, vocab, config.text_budget)


def drop_conditions(example: TrainingExample, rng: np.random.Generator, p: float) -> TrainingExample:
    """Independently null the text prefix and the semantic region, each with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop probability must lie in [0, 1]")
    drop_text = bool(rng.random() < p)
    drop_st = bool(rng.random() < p)
    return replace(example, drop_text=drop_text, drop_st=drop_st)


@dataclass
class Batch:
    char_ids: torch.Tensor  # (B, Lc)
    char_mask: torch.Tensor  # (B, Lc)
    drop_text: torch.Tensor  # (B,) bool
    st_ids: torch.Tensor  # (B, R) semantic ids for positions after the text prefix
    at_ids: torch.Tensor  # (B, R, K)
    is_st: torch.Tensor  # (B, R) bool
    valid: torch.Tensor  # (B, R) bool
    st_targets: torch.Tensor  # (B, L)
    at_targets: torch.Tensor  # (B, L, K)
    text_budget: int


def collate(examples: Sequence[TrainingExample]) -> Batch:
    vocab = examples[0].vocab
    budget = examples[0].text_budget
    K = vocab.num_codebooks
    Bn = len(examples)
    Lc = max(len(e.char_ids) for e in examples)
    R = max(e.n_st + e.n_rows for e in examples)
    L = budget + R
    char_ids = torch.zeros(Bn, Lc, dtype=torch.long)
    char_mask = torch.zeros(Bn, Lc, dtype=torch.bool)
    st_ids = torch.full((Bn, R), vocab.st_pad, dtype=torch.long)
    at_ids = torch.full((Bn, R, K), vocab.at_pad, dtype=torch.long)
    is_st = torch.zeros(Bn, R, dtype=torch.bool)
    valid = torch.zeros(Bn, R, dtype=torch.bool)
    st_targets = torch.full((Bn, L), IGNORE, dtype=torch.long)
    at_targets = torch.full((Bn, L, K), IGNORE, dtype=torch.long)
    for i, e in enumerate(examples):
        char_ids[i, :len(e.char_ids)] = torch.tensor(e.char_ids)
        char_mask[i, :len(e.char_ids)] = True
        st_ids[i, :e.n_st] = torch.tensor(e.input_st())
        at_ids[i, e.n_st:e.n_st + e.n_rows] = torch.from_numpy(np.array(e.delayed.tokens))
        is_st[i, :e.n_st] = True
        valid[i, :e.n_st + e.n_rows] = True
        st_t, at_t = e.targets()
        st_targets[i, :len(st_t)] = torch.from_numpy(st_t)
        at_targets[i, :len(at_t)] = torch.from_numpy(at_t)
    drop_text = torch.tensor([e.drop_text for e in examples], dtype=torch.bool)
    return Batch(char_ids, char_mask, drop_text, st_ids, at_ids, is_st, valid, st_targets, at_targets, budget)


def forward_batch(model: VoiceCloneLM, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced logits ``(st (B, L, Vs), at (B, L, K, Va))``."""
    lm, enc = model.lm, model.text_encoder
    Bn, budget = batch.char_ids.shape[0], batch.text_budget
    text_vec = enc(batch.char_ids, batch.char_mask)
    W_txt = text_vec.shape[-1]
    full = text_vec.new_zeros(Bn, budget, W_txt)
    full[:, :text_vec.shape[1]] = text_vec
    text_mask = torch.zeros(Bn, budget, dtype=torch.bool)
    text_mask[:, :batch.char_mask.shape[1]] = batch.char_mask
    if batch.drop_text.any():
        null = enc.null[None, None, :].expand(Bn, budget, W_txt)
        d = batch.drop_text[:, None, None]
        full = torch.where(d, null, full)
        text_mask = text_mask | batch.drop_text[:, None]
    rest = torch.where(batch.is_st[..., None], lm.embed_st(batch.st_ids), lm.embed_at(batch.at_ids))
    x = torch.cat([lm.embed_text(full), rest], dim=1)
    key_mask = torch.cat([text_mask, batch.valid], dim=1)
    hidden = lm(x, key_mask)
    return lm.project_heads(hidden, "st"), lm.project_heads(hidden, "at")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    st: torch.Tensor
    heads: list[torch.Tensor]

    def as_floats(self) -> dict:
        return {"loss": float(self.total.detach()), "loss_st": float(self.st.detach()),
                "loss_at": [float(h.detach()) for h in self.heads]}


def _region_mean(logits: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    n = int((targets != IGNORE).sum())
    if n == 0:
        return logits.new_zeros(()), 0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=IGNORE, reduction="sum") / n, n


def weighted_total(st_loss: torch.Tensor, head_losses: Sequence[torch.Tensor], weights: LossWeights) -> torch.Tensor:
    if len(head_losses) != len(weights.alpha):
        raise ValueError(f"{len(head_losses)} head losses but {len(weights.alpha)} weights")
    total = st_loss
    for a, h in zip(weights.alpha, head_losses):
        total = total + a * h
    return total


def compute_loss(st_logits: torch.Tensor, at_logits: torch.Tensor, st_targets: torch.Tensor,
                 at_targets: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    """Per-region mean cross-entropy: ``L_ST + sum_k alpha_k * L_k``; an empty region contributes 0."""
    if st_logits.shape[:-1] != st_targets.shape:
        raise ValueError(f"semantic logits {tuple(st_logits.shape)} misaligned with targets {tuple(st_targets.shape)}")
    if at_logits.shape[:-1] != at_targets.shape:
        raise ValueError(f"acoustic logits {tuple(at_logits.shape)} misaligned with targets {tuple(at_targets.shape)}")
    st_loss, _ = _region_mean(st_logits, st_targets)
    heads = [_region_mean(at_logits[..., k, :], at_targets[..., k])[0] for k in range(at_targets.shape[-1])]
    return LossBreakdown(weighted_total(st_loss, heads, weights), st_loss, heads)


def token_nll(st_logits, at_logits, st_targets, at_targets) -> float:
    """Unweighted mean negative log-likelihood over every target token (nats/token)."""
    total = F.cross_entropy(st_logits.reshape(-1, st_logits.shape[-1]), st_targets.reshape(-1),
                            ignore_index=IGNORE, reduction="sum")
    total = total + F.cross_entropy(at_logits.reshape(-1, at_logits.shape[-1]), at_targets.reshape(-1),
                                    ignore_index=IGNORE, reduction="sum")
    n = int((st_targets != IGNORE).sum() + (at_targets != IGNORE).sum())
    return float(total) / max(n, 1)


# -- optimisation ---------------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_frac: float = 0.05
    min_lr_ratio: float = 0.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    cond_drop_p: float = 0.1
    loss_weights: tuple[float, ...] | None = None
    freeze_text_base: bool = False
    checkpoint_every: int = 0
    # optional two-phase curriculum: switch to the finetune corpus at this step
    finetune_from_step: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        if self.loss_weights is not None:
            d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if d.get("loss_weights") is not None:
            d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``peak_lr`` over ``warmup_frac * steps``, then cosine decay."""
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.peak_lr * step / warm
    progress = min(1.0, (step - warm) / max(1, cfg.steps - warm))
    floor = cfg.peak_lr * cfg.min_lr_ratio
    return floor + (cfg.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int = 0  # completed optimisation steps


def make_optimizer(model: VoiceCloneLM, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.freeze_text_base:
        for name, p in model.text_encoder.named_parameters():
            p.requires_grad_(".adapter." in name or name == "null")
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=0.0, betas=cfg.betas, weight_decay=cfg.weight_decay)


class Trainer:
    """Owns the model, optimizer and data for one training run.

    Batch composition and condition drops for step ``s`` come from a stream
    seeded by ``(seed, "batch", s)``, so resuming at any step replays the
    exact same data order.
    """

    def __init__(self, model: VoiceCloneLM, examples: Sequence[TrainingExample], cfg: TrainConfig,
                 finetune_examples: Sequence[TrainingExample] | None = None,
                 optimizer: torch.optim.Optimizer | None = None, state: TrainState | None = None):
        if not examples:
            raise ValueError("no training examples")
        self.model = model
        self.examples = list(examples)
        self.finetune_examples = list(finetune_examples) if finetune_examples else None
        self.cfg = cfg
        self.optimizer = optimizer or make_optimizer(model, cfg)
        self.state = state or TrainState()
        K = model.vocab.num_codebooks
        self.weights = LossWeights(cfg.loss_weights) if cfg.loss_weights else LossWeights.for_codebooks(K)

    def pool(self, step: int) -> list[TrainingExample]:
        if self.finetune_examples and self.cfg.finetune_from_step is not None and step >= self.cfg.finetune_from_step:
            return self.finetune_examples
        return self.examples

    def make_batch(self, step: int) -> list[TrainingExample]:
        pool = self.pool(step)
        rng = numpy_rng(self.cfg.seed, "batch", step)
        idx = rng.choice(len(pool), self.cfg.batch_size, replace=len(pool) < self.cfg.batch_size)
        return [drop_conditions(pool[i], rng, self.cfg.cond_drop_p) for i in idx]

    def train_step(self) -> dict:
        step = self.state.step
        lr = lr_at(step, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        examples = self.make_batch(step)
        batch = collate(examples)
        self.model.train()
        st_logits, at_logits = forward_batch(self.model, batch)
        loss = compute_loss(st_logits, at_logits, batch.st_targets, batch.at_targets, self.weights)
        if not torch.isfinite(loss.total):
            raise FloatingPointError(
                f"non-finite loss at step {step + 1}: st={float(loss.st.detach())}, "
                f"heads={[float(h.detach()) for h in loss.heads]}, lr={lr}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        grad_norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip if self.cfg.grad_clip else float("inf"))
        self.optimizer.step()
        self.state.step = step + 1
        return {"step": self.state.step, **loss.as_floats(), "lr": lr, "grad_norm": float(grad_norm),
                "text_drops": int(sum(e.drop_text for e in examples)),
                "st_drops": int(sum(e.drop_st for e in examples)), "seed": self.cfg.seed}

    def run(self, until: int | None = None, log_path=None, on_step=None) -> list[dict]:
        until = self.cfg.steps if until is None else until
        records = []
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.state.step < until:
                t0 = time.perf_counter()
                rec = self.train_step()
                rec["sec"] = round(time.perf_counter() - t0, 4)
                records.append(rec)
                if fh:
                    # wall-clock stays out of the log so equal seeds give identical files
                    fh.write(json.dumps({k: v for k, v in rec.items() if k != "sec"}) + "\n")
                    fh.flush()
                if on_step:
                    on_step(self, rec)
        finally:
            if fh:
                fh.close()
        return records


@torch.no_grad()
def evaluate(model: VoiceCloneLM, examples: Sequence[TrainingExample], weights: LossWeights,
             batch_size: int = 16) -> dict:
    """Teacher-forced losses on ``examples`` with all conditions present."""
    model.eval()
    nll_sum, n_tok, totals = 0.0, 0, []
    for i in range(0, len(examples), batch_size):
        chunk = [replace(e, drop_text=False, drop_st=False) for e in examples[i:i + batch_size]]
        batch = collate(chunk)
        st_logits, at_logits = forward_batch(model, batch)
        n = int((batch.st_targets != IGNORE).sum() + (batch.at_targets != IGNORE).sum())
        nll_sum += token_nll(st_logits, at_logits, batch.st_targets, batch.at_targets) * n
        n_tok += n
        totals.append(float(compute_loss(st_logits, at_logits, batch.st_targets, batch.at_targets, weights).total))
    return {"nll_per_token": nll_sum / max(n_tok, 1), "weighted_loss": float(np.mean(totals)), "tokens": n_tok}
