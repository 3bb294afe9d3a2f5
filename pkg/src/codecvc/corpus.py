"""Deterministic synthetic corpus standing in for the SSL tokenizer and the codec.

Generation rules (all tables derived from the corpus seed):

* text: 2-3 short words over ``alphabet``; hesitation markers are inserted
  as standalone words.
* semantic frames: each character maps to one semantic id (a fixed
  injective table). Each character is held for a run of 1-4 frames; the run
  length is drawn from a per-(speaker, text) stream, with hesitation
  markers biased towards long runs (spontaneous elongation).
* acoustic frames: semantic id ``s`` spoken by speaker ``p`` yields, in
  codebook ``k``, ``perm[p][k][code[k][s]]``; ``code`` is a speaker-free
  table, ``perm`` a per-speaker permutation of the codebook id space.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .seeding import numpy_rng
from .vocab import AcousticGrid, TokenVocabulary, UtteranceRecord

ORDINARY_RUN_P = (0.35, 0.35, 0.2, 0.1)
HESITATION_RUN_P = (0.05, 0.15, 0.3, 0.5)


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    size: int = 32
    num_speakers: int = 4
    alphabet: str = "abdeiklmnorstu"
    hesitation: str = "~"
    max_chars: int = 10
    sample_rate: int = 16000
    downsample: int = 320

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticUtterance:
    id: str
    text: str
    st_raw: tuple[int, ...]
    at: AcousticGrid
    speaker: int

    def to_record(self) -> UtteranceRecord:
        return UtteranceRecord(self.id, self.text, self.st_raw, self.at, self.speaker)


def _text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _char_table(config: CorpusConfig, vocab: TokenVocabulary) -> dict[str, int]:
    chars = sorted(set(config.alphabet) | set(config.hesitation) | {" "})
    if len(chars) > vocab.st_size:
        raise ValueError("alphabet larger than the semantic codebook")
    ids = numpy_rng(config.seed, "char_table").permutation(vocab.st_size)[:len(chars)]
    return {c: int(i) for c, i in zip(chars, ids)}


@lru_cache(maxsize=32)
def _code_tables(seed: int, st_size: int, at_size: int, K: int) -> np.ndarray:
    """Speaker-free code per (codebook, semantic id): shape (K, st_size)."""
    return np.stack([numpy_rng(seed, "code", k).integers(0, at_size, st_size) for k in range(K)])


@lru_cache(maxsize=256)
def speaker_permutation(seed: int, speaker: int, at_size: int, K: int) -> np.ndarray:
    """Per-codebook permutation of the acoustic id space for one speaker: (K, at_size)."""
    return np.stack([numpy_rng(seed, "speaker", speaker, k).permutation(at_size) for k in range(K)])


def speaker_free_codes(st_raw, seed: int, vocab: TokenVocabulary) -> np.ndarray:
    table = _code_tables(seed, vocab.st_size, vocab.at_size, vocab.num_codebooks)
    st = np.asarray(st_raw, dtype=np.int64)
    return table[:, st].T.reshape(len(st), vocab.num_codebooks)


def oracle_st(text: str, seed: int, speaker: int, vocab: TokenVocabulary,
              config: CorpusConfig | None = None) -> list[int]:
    """Frame-level semantic ids for ``text`` read by ``speaker`` (pre-dedup)."""
    config = config or CorpusConfig(seed=seed)
    if not text:
        return []
    table = _char_table(config, vocab)
    rng = numpy_rng(seed, "runs", speaker, _text_key(text))
    out: list[int] = []
    for c in text:
        p = HESITATION_RUN_P if c in config.hesitation else ORDINARY_RUN_P
        run = int(rng.choice(4, p=p)) + 1
        out.extend([table[c]] * run)
    return out


def oracle_at(st_raw, speaker: int, seed: int, vocab: TokenVocabulary) -> AcousticGrid:
    codes = speaker_free_codes(st_raw, seed, vocab)
    perm = speaker_permutation(seed, speaker, vocab.at_size, vocab.num_codebooks)
    at = np.empty_like(codes)
    for k in range(vocab.num_codebooks):
        at[:, k] = perm[k][codes[:, k]]
    return AcousticGrid(at)


def _gen_text(rng: np.random.Generator, config: CorpusConfig) -> str:
    while True:
        words = []
        for _ in range(int(rng.integers(2, 4))):
            if rng.random() < 0.3:
                words.append(config.hesitation[int(rng.integers(len(config.hesitation)))])
            else:
                n = int(rng.integers(1, 5))
                words.append("".join(config.alphabet[i] for i in rng.integers(0, len(config.alphabet), n)))
        text = " ".join(words)
        if len(text) <= config.max_chars:
            return text


def gen_corpus(size: int, seed: int, vocab: TokenVocabulary, K: int | None = None,
               config: CorpusConfig | None = None) -> list[SyntheticUtterance]:
    """``size`` utterances; text ``i // num_speakers`` read by speaker ``i % num_speakers``."""
    if size < 1:
        raise ValueError("corpus size must be >= 1")
    if K is not None and K != vocab.num_codebooks:
        raise ValueError(f"K={K} disagrees with vocabulary ({vocab.num_codebooks} codebooks)")
    config = config or CorpusConfig(seed=seed, size=size)
    if config.seed != seed:
        config = CorpusConfig(**{**config.to_dict(), "seed": seed})
    n_texts = -(-size // config.num_speakers)
    texts: list[str] = []
    i = 0
    while len(texts) < n_texts:
        t = _gen_text(numpy_rng(seed, "text", i), config)
        i += 1
        if t not in texts:
            texts.append(t)
    out = []
    for u in range(size):
        text = texts[u // config.num_speakers]
        speaker = u % config.num_speakers
        st_raw = oracle_st(text, seed, speaker, vocab, config)
        at = oracle_at(st_raw, speaker, seed, vocab)
        out.append(SyntheticUtterance(f"utt{u:05d}", text, tuple(st_raw), at, speaker))
    return out


def render_pseudo_waveform(at: AcousticGrid, sample_rate: int = 16000, downsample: int = 320) -> np.ndarray:
    """Expand each frame to ``downsample`` samples of a sinusoid mix keyed by its K tokens."""
    T, K = at.tokens.shape
    if T == 0:
        return np.zeros(0, dtype=np.float32)
    n = np.arange(downsample) / sample_rate
    tok = at.tokens.astype(np.float64)
    freqs = 80.0 + 15.0 * tok * (np.arange(K) + 1)[None, :]  # (T, K)
    amps = 0.5 ** np.arange(K)
    blocks = (amps[None, :, None] * np.sin(2 * np.pi * freqs[:, :, None] * n[None, None, :])).sum(1)
    return (blocks / amps.sum()).astype(np.float32).reshape(-1)


def hesitation_run_lengths(corpus, config: CorpusConfig, vocab: TokenVocabulary) -> tuple[list[int], list[int]]:
    """Run lengths of hesitation vs ordinary characters, read back from st_raw."""
    table = _char_table(config, vocab)
    hes_ids = {table[c] for c in config.hesitation}
    hes, ordinary = [], []
    for utt in corpus:
        runs: list[tuple[int, int]] = []
        for s in utt.st_raw:
            if runs and runs[-1][0] == s:
                runs[-1] = (s, runs[-1][1] + 1)
            else:
                runs.append((s, 1))
        # repeated adjacent characters merge into one run; skip those texts
        if len(runs) != len(utt.text) or any(a == b for a, b in zip(utt.text, utt.text[1:])):
            continue
        for s, n in runs:
            (hes if s in hes_ids else ordinary).append(n)
    return hes, ordinary
