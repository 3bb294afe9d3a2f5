"""Two-stage guided generation, long-text segmentation and clip concatenation.

Guidance blends log-softmax-normalised scores, then re-normalises before
sampling. Each guidance pass owns its own incremental cache and runs with
batch size one, so the conditional pass is computed identically whether or
not the masked passes run alongside it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .delay import remove_delay
from .layers import KVCache
from .model import VoiceCloneLM
from .corpus import render_pseudo_waveform
from .seeding import derive_seed, torch_generator
from .text_encoder import TextEncoding
from .vocab import AcousticGrid, SemanticStream, ValidationError, dedup_consecutive, validate_grid

DEFAULT_PUNCTUATION = "，。！？；,.!?;"


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 1.5  # semantic-stage text guidance
    alpha: float = 1.3  # acoustic-stage text guidance
    beta: float = 1.5  # acoustic-stage semantic guidance
    temperature: float = 1.0
    top_k: int = 50
    max_st_len: int = 256
    max_at_len: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma", "alpha", "beta", "temperature"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def blend_stage1(cond_logp: torch.Tensor, uncond_logp: torch.Tensor, gamma: float) -> torch.Tensor:
    if cond_logp.shape != uncond_logp.shape:
        raise ValueError(f"shape mismatch: {tuple(cond_logp.shape)} vs {tuple(uncond_logp.shape)}")
    return gamma * cond_logp + (1.0 - gamma) * uncond_logp


def stage2_coefficients(alpha: float, beta: float) -> tuple[float, float, float]:
    """Weights on (full, text-masked, semantic-masked) scores; they sum to 1."""
    return beta * alpha, beta * (1.0 - alpha), 1.0 - beta


def blend_stage2(cond: torch.Tensor, text_masked: torch.Tensor, sem_masked: torch.Tensor,
                 alpha: float, beta: float) -> torch.Tensor:
    if not cond.shape == text_masked.shape == sem_masked.shape:
        raise ValueError(f"shape mismatch: {tuple(cond.shape)}, {tuple(text_masked.shape)}, {tuple(sem_masked.shape)}")
    inner = alpha * cond + (1.0 - alpha) * text_masked
    return beta * inner + (1.0 - beta) * sem_masked


def sample_token(scores: torch.Tensor, temperature: float, top_k: int, generator: torch.Generator,
                 banned: Sequence[int] = ()) -> int:
    """Temperature + top-k sampling from (unnormalised) log scores; ``top_k == 1`` is greedy."""
    scores = scores / temperature
    if banned:
        scores = scores.clone()
        scores[list(banned)] = float("-inf")
    if top_k == 1:
        return int(torch.argmax(scores))
    k = min(top_k, scores.shape[-1])
    vals, idx = torch.topk(scores, k)
    probs = torch.softmax(vals, dim=-1)
    return int(idx[torch.multinomial(probs, 1, generator=generator)])


@dataclass
class _Pass:
    """One guidance pass: its input prefix and decoding cache."""

    cache: KVCache
    last_hidden: torch.Tensor | None = None


def _prefill(model: VoiceCloneLM, text: TextEncoding, st_ids: list[int]) -> _Pass:
    lm = model.lm
    x = lm.embed_text(text.vectors[None].to(lm.text_proj.weight.dtype))
    mask = text.mask[None]
    if st_ids:
        x = torch.cat([x, lm.embed_st(torch.tensor([st_ids]))], dim=1)
        mask = torch.cat([mask, torch.ones(1, len(st_ids), dtype=torch.bool)], dim=1)
    p = _Pass(lm.new_cache())
    p.last_hidden = lm(x, mask, cache=p.cache)[0, -1]
    return p


def _advance(model: VoiceCloneLM, p: _Pass, x: torch.Tensor) -> None:
    p.last_hidden = model.lm(x[None, None], torch.ones(1, 1, dtype=torch.bool), cache=p.cache)[0, -1]


@torch.no_grad()
def generate_st(model: VoiceCloneLM, text_enc: TextEncoding, guidance: GuidanceConfig,
                prefix: Sequence[int] = (), guided: bool = True, dump: list | None = None) -> SemanticStream:
    """Sample semantic tokens until S_eos or ``max_st_len`` new tokens.

    ``prefix`` holds teacher-forced semantic ids (e.g. a prompt's own
    tokens); they are not part of the result. ``guided=False`` never runs
    the unconditional pass.
    """
    model.eval()
    vocab = model.vocab
    lm = model.lm
    budget = model.backbone.st_at_budget
    gen = torch_generator(guidance.seed, "st")
    passes = [_prefill(model, text_enc, list(prefix))]
    if guided:
        passes.append(_prefill(model, model.text_encoder.null_condition(text_enc.padded_length), list(prefix)))
    out: list[int] = []
    terminated = False
    # leave room for S_eos plus at least the first delayed acoustic row
    limit = min(guidance.max_st_len, budget - len(prefix) - 2)
    while len(out) < limit:
        logps = [F.log_softmax(lm.project_heads(p.last_hidden, "st"), dim=-1) for p in passes]
        scores = blend_stage1(logps[0], logps[1], guidance.gamma) if guided else logps[0]
        if dump is not None:
            dump.append({"stage": 1, "step": len(out), "scores": scores.tolist()})
        tok = sample_token(scores, guidance.temperature, guidance.top_k, gen)
        if tok == vocab.s_eos:
            terminated = True
            break
        out.append(tok)
        emb = lm.embed_st(torch.tensor(tok))
        for p in passes:
            _advance(model, p, emb)
    tokens = dedup_consecutive(out).tokens
    return SemanticStream(tokens, terminated=terminated, truncated=not terminated)


@dataclass
class AcousticResult:
    grid: AcousticGrid
    truncated: bool = False
    dump: list = field(default_factory=list)


@torch.no_grad()
def generate_at(model: VoiceCloneLM, text_enc: TextEncoding, st: SemanticStream, prompt: AcousticGrid | None,
                guidance: GuidanceConfig, guided: bool = True, debug: bool = False) -> AcousticResult:
    """Delayed-pattern acoustic decoding with three guidance passes.

    The prompt grid is delayed and teacher-forced; cells whose frame index
    falls inside the prompt are never resampled, structurally-known fills
    are forced, and only head 0 may emit A_fill (which ends the utterance).
    Returns the generated frames with the prompt frames stripped.
    """
    model.eval()
    vocab, lm = model.vocab, model.lm
    K = vocab.num_codebooks
    fill = vocab.a_fill
    if prompt is None:
        prompt = AcousticGrid.empty(K)
    if prompt.K != K:
        raise ValidationError(f"prompt has {prompt.K} codebooks, model expects {K}")
    report = validate_grid(prompt, vocab)
    if not report:
        raise ValidationError(f"malformed prompt at (t, k, id) = {report.violation}")
    P = prompt.T
    st_ids = SemanticStream(st.tokens, terminated=True).with_eos(vocab)
    capacity = model.backbone.st_at_budget - len(st_ids)  # delayed rows that fit
    if P + K - 1 > capacity:
        raise ValidationError(f"prompt of {P} frames does not fit the remaining budget of {capacity} rows")
    gen = torch_generator(guidance.seed, "at")

    passes = [_prefill(model, text_enc, st_ids)]
    if guided:
        null_text = model.text_encoder.null_condition(text_enc.padded_length)
        passes.append(_prefill(model, null_text, st_ids))
        passes.append(_prefill(model, text_enc, [vocab.st_null] * len(st_ids)))

    rows: list[np.ndarray] = []
    end_T: int | None = None
    truncated = False
    dump: list = []
    r = 0
    while True:
        row = np.full(K, fill, dtype=np.int64)
        need = []
        for k in range(K):
            f = r - k
            if f < 0 or (end_T is not None and f >= end_T):
                continue
            if f < P:
                row[k] = prompt.tokens[f, k]
            else:
                need.append(k)
        if 0 in need and (r - P >= guidance.max_at_len or r >= capacity - K + 1):
            # out of frames or out of budget: close the utterance at this row
            end_T = r
            truncated = True
            need.remove(0)
        if need:
            logps = [F.log_softmax(lm.project_heads(p.last_hidden, "at"), dim=-1) for p in passes]
            if guided:
                scores = blend_stage2(logps[0], logps[1], logps[2], guidance.alpha, guidance.beta)
            else:
                scores = logps[0]
            if debug:
                dump.append({"stage": 2, "row": r, "scores": scores.tolist()})
            for k in need:
                tok = sample_token(scores[k], guidance.temperature, guidance.top_k, gen,
                                   banned=() if k == 0 else (fill,))
                if k == 0 and tok == fill:
                    end_T = r  # later heads of this row hold frames < end_T and stay sampled
                else:
                    row[k] = tok
        rows.append(row)
        if end_T is not None and r >= end_T + K - 2:
            break
        emb = lm.embed_at(torch.from_numpy(row))
        for p in passes:
            _advance(model, p, emb)
        r += 1

    # with K == 1 the stop row itself is not part of the delayed grid
    delayed = np.stack(rows)[:end_T + K - 1]
    grid = remove_delay(delayed, vocab)
    out = AcousticGrid(grid.tokens[P:])
    return AcousticResult(out, truncated, dump)


def segment_text(text: str, min_len: int = 30, punctuation: str = DEFAULT_PUNCTUATION) -> list[str]:
    """Cut after punctuation once a segment reaches ``min_len`` characters.

    A trailing remainder shorter than ``min_len`` is merged into the previous
    segment. ``"".join(result) == text`` always holds.
    """
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    segments: list[str] = []
    start = 0
    for i, c in enumerate(text):
        if c in punctuation and i + 1 - start >= min_len:
            segments.append(text[start:i + 1])
            start = i + 1
    rest = text[start:]
    if rest:
        if segments and len(rest) < min_len:
            segments[-1] += rest
        else:
            segments.append(rest)
    return segments


def concat_clips(clips: Sequence, sample_rate: int, gap_ms: float = 100.0) -> np.ndarray:
    """Join clips with ``round(gap_ms / 1000 * sample_rate)`` zero samples between them.

    Each clip is an array (assumed at ``sample_rate``) or a ``(samples, rate)`` pair.
    """
    arrays = []
    for c in clips:
        if isinstance(c, tuple):
            samples, rate = c
            if rate != sample_rate:
                raise ValueError(f"clip at {rate} Hz in a {sample_rate} Hz concatenation")
            c = samples
        arrays.append(np.asarray(c, dtype=np.float32).reshape(-1))
    if not arrays:
        return np.zeros(0, dtype=np.float32)
    gap = np.zeros(int(round(gap_ms / 1000.0 * sample_rate)), dtype=np.float32)
    parts = [arrays[0]]
    for a in arrays[1:]:
        parts.extend([gap, a])
    return np.concatenate(parts)


@dataclass
class SegmentResult:
    text: str
    st: SemanticStream
    at: AcousticResult
    samples: np.ndarray


def synthesize_segment(model: VoiceCloneLM, text: str, guidance: GuidanceConfig, prompt=None,
                       debug: bool = False) -> tuple[SemanticStream, AcousticResult]:
    """Stage 1 then stage 2 for one segment.

    ``prompt`` is either an :class:`AcousticGrid` (used as a bare acoustic
    prefix) or a record with ``text``/``st``/``at`` fields, whose text is
    prepended and whose semantic tokens are teacher-forced ahead of the
    sampled ones before its acoustic frames are continued.
    """
    budget = model.backbone.text_budget
    st_prefix: tuple[int, ...] = ()
    prompt_grid = None
    if isinstance(prompt, AcousticGrid):
        prompt_grid = prompt
    elif prompt is not None:
        text = f"{prompt.text} {text}"
        st_prefix = dedup_consecutive(prompt.st, model.vocab).tokens
        prompt_grid = prompt.at
    text_enc = model.text_encoder.encode_text(text, budget)
    dump: list | None = [] if debug else None
    st = generate_st(model, text_enc, guidance, prefix=st_prefix, dump=dump)
    full = dedup_consecutive(list(st_prefix) + list(st.tokens)).tokens
    at = generate_at(model, text_enc, SemanticStream(full), prompt_grid, guidance, debug=debug)
    if debug:
        at.dump = dump + at.dump
    return st, at


def synthesize(model: VoiceCloneLM, text: str, guidance: GuidanceConfig, prompt=None, min_seg_len: int = 30,
               gap_ms: float = 100.0, sample_rate: int = 16000, downsample: int = 320,
               debug: bool = False) -> tuple[dict, np.ndarray]:
    """Segment ``text``, synthesize each piece and join the pseudo-waveforms with silence."""
    segments = segment_text(text, min_seg_len)
    results: list[SegmentResult] = []
    for i, seg in enumerate(segments):
        g = GuidanceConfig(**{**guidance.to_dict(), "seed": derive_seed(guidance.seed, "segment", i)})
        st, at = synthesize_segment(model, seg, g, prompt, debug)
        results.append(SegmentResult(seg, st, at, render_pseudo_waveform(at.grid, sample_rate, downsample)))
    samples = concat_clips([r.samples for r in results], sample_rate, gap_ms)
    K = model.vocab.num_codebooks
    at_all = np.concatenate([r.at.grid.tokens for r in results]) if results else np.zeros((0, K), dtype=np.int64)
    response = {
        "text": text,
        "st": [t for r in results for t in r.st.tokens],
        "at": at_all.tolist(),
        "flags": {"st_truncated": any(r.st.truncated for r in results),
                  "at_truncated": any(r.at.truncated for r in results)},
        "segments": [{"text": r.text, "st": list(r.st.tokens), "frames": r.at.grid.T,
                      "st_truncated": r.st.truncated, "at_truncated": r.at.truncated} for r in results],
        "num_samples": int(samples.shape[0]),
    }
    if debug:
        response["scores"] = [r.at.dump for r in results]
    return response, samples
