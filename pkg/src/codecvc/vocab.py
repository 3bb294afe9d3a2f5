"""Token id spaces, stream containers and the utterance record format.

Id layout
---------
Semantic space (size ``st_size + 3``)::

    [0, st_size)      data tokens
    st_size           S_eos
    st_size + 1       NULL_COND (dropped semantic condition)
    st_size + 2       PAD

Acoustic space, per codebook (size ``at_size + 2``)::

    [0, at_size)      data tokens
    at_size           A_fill (shared by every codebook)
    at_size + 1       PAD

In the language model's single embedding table the semantic space comes
first, followed by ``K`` acoustic blocks; codebook ``k`` (0-based) starts at
``semantic_vocab + k * acoustic_vocab``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np


class ValidationError(ValueError):
    """Raised when token ids or stream structure are invalid."""


@dataclass(frozen=True)
class TokenVocabulary:
    st_size: int = 500
    at_size: int = 64
    num_codebooks: int = 12

    def __post_init__(self):
        if self.num_codebooks < 1:
            raise ValidationError("num_codebooks must be >= 1")
        if self.st_size < 2 or self.at_size < 2:
            raise ValidationError("st_size and at_size must be >= 2")

    @property
    def K(self) -> int:
        return self.num_codebooks

    # semantic specials
    @property
    def s_eos(self) -> int:
        return self.st_size

    @property
    def st_null(self) -> int:
        return self.st_size + 1

    @property
    def st_pad(self) -> int:
        return self.st_size + 2

    @property
    def semantic_vocab(self) -> int:
        return self.st_size + 3

    # acoustic specials
    @property
    def a_fill(self) -> int:
        return self.at_size

    @property
    def at_pad(self) -> int:
        return self.at_size + 1

    @property
    def acoustic_vocab(self) -> int:
        return self.at_size + 2

    # output head widths: data + the one special each head may predict
    @property
    def st_head_size(self) -> int:
        return self.st_size + 1

    @property
    def at_head_size(self) -> int:
        return self.at_size + 1

    @property
    def embedding_rows(self) -> int:
        return self.semantic_vocab + self.num_codebooks * self.acoustic_vocab

    def codebook_offset(self, k: int) -> int:
        """Row of codebook ``k``'s id 0 in the combined embedding table (0-based k)."""
        if not 0 <= k < self.num_codebooks:
            raise ValidationError(f"codebook {k} out of range [0, {self.num_codebooks})")
        return self.semantic_vocab + k * self.acoustic_vocab

    def to_dict(self) -> dict:
        return {"st_size": self.st_size, "at_size": self.at_size, "num_codebooks": self.num_codebooks}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenVocabulary":
        return cls(st_size=int(d["st_size"]), at_size=int(d["at_size"]), num_codebooks=int(d["num_codebooks"]))


@dataclass(frozen=True)
class SemanticStream:
    """Deduplicated semantic ids; ``terminated`` means a trailing S_eos follows.

    ``tokens`` never contains S_eos itself; use :meth:`with_eos` for the
    id sequence as it appears in the model input.
    """

    tokens: tuple[int, ...]
    terminated: bool = True
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        for i in range(1, len(self.tokens)):
            if self.tokens[i] == self.tokens[i - 1]:
                raise ValidationError(f"consecutive duplicate semantic id at position {i}")

    def __len__(self) -> int:
        return len(self.tokens)

    def with_eos(self, vocab: TokenVocabulary) -> list[int]:
        return list(self.tokens) + ([vocab.s_eos] if self.terminated else [])


@dataclass(frozen=True)
class AcousticGrid:
    """Time-major ``T x K`` matrix of raw acoustic ids."""

    tokens: np.ndarray
    frame_rate: float = 50.0

    def __post_init__(self):
        arr = np.asarray(self.tokens, dtype=np.int64)
        if arr.ndim != 2:
            raise ValidationError(f"acoustic grid must be 2-D, got shape {arr.shape}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "tokens", arr)

    @property
    def T(self) -> int:
        return self.tokens.shape[0]

    @property
    def K(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        if not isinstance(other, AcousticGrid):
            return NotImplemented
        return self.tokens.shape == other.tokens.shape and bool(np.array_equal(self.tokens, other.tokens))

    def __hash__(self):
        return hash((self.tokens.shape, self.tokens.tobytes()))

    @classmethod
    def empty(cls, K: int, frame_rate: float = 50.0) -> "AcousticGrid":
        return cls(np.zeros((0, K), dtype=np.int64), frame_rate)


def dedup_consecutive(stream: Iterable[int], vocab: TokenVocabulary | None = None) -> SemanticStream:
    """Collapse runs of equal ids, keeping the first of each run.

    Returns an unterminated stream; callers append S_eos via ``terminated``.
    """
    ids = [int(x) for x in stream]
    if vocab is not None:
        for i, t in enumerate(ids):
            if not 0 <= t < vocab.st_size:
                raise ValidationError(f"semantic id {t} at position {i} outside [0, {vocab.st_size})")
    out: list[int] = []
    for t in ids:
        if not out or out[-1] != t:
            out.append(t)
    return SemanticStream(tuple(out), terminated=False)


@dataclass(frozen=True)
class GridReport:
    ok: bool
    violation: tuple[int, int, int] | None = None  # (t, k, id), 0-based

    def __bool__(self) -> bool:
        return self.ok


def validate_grid(grid: AcousticGrid | np.ndarray, vocab: TokenVocabulary) -> GridReport:
    arr = grid.tokens if isinstance(grid, AcousticGrid) else np.asarray(grid)
    if arr.ndim != 2 or arr.shape[1] != vocab.num_codebooks:
        return GridReport(False, (-1, -1, -1))
    bad = (arr < 0) | (arr >= vocab.at_size)
    if not bad.any():
        return GridReport(True)
    t, k = map(int, np.argwhere(bad)[0])
    return GridReport(False, (t, k, int(arr[t, k])))


def derive_frame_rate(sample_rate: float, downsample: int) -> float:
    if downsample <= 0:
        raise ValueError("downsample must be positive")
    return sample_rate / downsample


# --- record format ---------------------------------------------------------
#
# One utterance per line, tab-separated ``key=value`` fields in this order:
#
#   id=<id>  text=<escaped text>  st=<ints>  at=<row>;<row>;...  [speaker=<int>]
#
# <ints> and <row> are space-separated decimal integers; each <row> is one
# frame with exactly K ids. An empty st or at field means zero tokens/frames
# (``at=`` then carries ``|K`` so the codebook count survives, e.g. ``at=|4``).
# Text escapes: backslash -> \\, tab -> \t, newline -> \n.


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    text: str
    st: tuple[int, ...]
    at: AcousticGrid
    speaker: int | None = None
    extra: dict = field(default_factory=dict, compare=False)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def format_record(rec: UtteranceRecord) -> str:
    st = " ".join(str(t) for t in rec.st)
    if rec.at.T == 0:
        at = f"|{rec.at.K}"
    else:
        at = ";".join(" ".join(str(int(x)) for x in row) for row in rec.at.tokens)
    fields = [f"id={rec.id}", f"text={_escape(rec.text)}", f"st={st}", f"at={at}"]
    if rec.speaker is not None:
        fields.append(f"speaker={rec.speaker}")
    return "\t".join(fields)


def parse_record(line: str, lineno: int = 0) -> UtteranceRecord:
    parts = line.rstrip("\n").split("\t")
    kv = {}
    for p in parts:
        key, sep, value = p.partition("=")
        if not sep:
            raise ValidationError(f"line {lineno}: field without '=': {p!r}")
        kv[key] = value
    for key in ("id", "text", "st", "at"):
        if key not in kv:
            raise ValidationError(f"line {lineno}: missing field {key!r}")
    try:
        st = tuple(int(x) for x in kv["st"].split())
        at_field = kv["at"]
        if at_field.startswith("|"):
            grid = np.zeros((0, int(at_field[1:])), dtype=np.int64)
        else:
            rows = [[int(x) for x in r.split()] for r in at_field.split(";")]
            widths = {len(r) for r in rows}
            if len(widths) != 1:
                raise ValidationError(f"line {lineno}: ragged acoustic rows")
            grid = np.array(rows, dtype=np.int64)
    except ValueError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc
    speaker = int(kv["speaker"]) if "speaker" in kv else None
    return UtteranceRecord(kv["id"], _unescape(kv["text"]), st, AcousticGrid(grid), speaker)


def write_records(records: Sequence[UtteranceRecord], fh: TextIO) -> None:
    for rec in records:
        fh.write(format_record(rec) + "\n")


def read_records(fh: TextIO) -> Iterator[UtteranceRecord]:
    for lineno, line in enumerate(fh, 1):
        if line.strip():
            yield parse_record(line, lineno)
