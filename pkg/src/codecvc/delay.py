"""Delay interleaving of residual codebooks.

Codebook ``k`` (0-based) is shifted ``k`` steps later than codebook 0, so the
row emitted at decoder step ``r`` holds frame ``r - k`` for head ``k``::

    A (T=2, K=3)        delayed (4 x 3)
    a1 b1 c1            a1  F  F
    a2 b2 c2            a2 b1  F
                         F b2 c1
                         F  F c2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import AcousticGrid, TokenVocabulary, ValidationError, validate_grid


@dataclass(frozen=True)
class DelayedGrid:
    tokens: np.ndarray  # (T + K - 1) x K
    source_T: int
    fill: int

    @property
    def K(self) -> int:
        return self.tokens.shape[1]

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]


def fill_mask(T: int, K: int) -> np.ndarray:
    """Boolean (T+K-1) x K mask, True where the delayed layout holds A_fill."""
    rows = T + K - 1
    r = np.arange(rows)[:, None]
    k = np.arange(K)[None, :]
    frame = r - k
    return (frame < 0) | (frame >= T)


def apply_delay(grid: AcousticGrid | np.ndarray, vocab: TokenVocabulary) -> DelayedGrid:
    arr = grid.tokens if isinstance(grid, AcousticGrid) else np.asarray(grid, dtype=np.int64)
    report = validate_grid(arr, vocab)
    if not report:
        raise ValidationError(f"invalid acoustic grid at (t, k, id) = {report.violation}")
    T, K = arr.shape
    out = np.full((T + K - 1, K), vocab.a_fill, dtype=np.int64)
    for k in range(K):
        out[k:k + T, k] = arr[:, k]
    out.setflags(write=False)
    return DelayedGrid(out, T, vocab.a_fill)


def remove_delay(delayed: DelayedGrid | np.ndarray, vocab: TokenVocabulary) -> AcousticGrid:
    arr = delayed.tokens if isinstance(delayed, DelayedGrid) else np.asarray(delayed, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != vocab.num_codebooks:
        raise ValidationError(f"delayed grid must have {vocab.num_codebooks} columns, got shape {arr.shape}")
    rows, K = arr.shape
    T = rows - K + 1
    if T < 0:
        raise ValidationError(f"delayed grid has {rows} rows, fewer than K-1 = {K - 1}")
    fills = fill_mask(T, K)
    is_fill = arr == vocab.a_fill
    bad = fills != is_fill
    if bad.any():
        r, k = map(int, np.argwhere(bad)[0])
        raise ValidationError(
            f"malformed fill structure at row {r}, codebook {k}: id {int(arr[r, k])}")
    data_bad = ~fills & ((arr < 0) | (arr >= vocab.at_size))
    if data_bad.any():
        r, k = map(int, np.argwhere(data_bad)[0])
        raise ValidationError(f"data cell at row {r}, codebook {k} holds invalid id {int(arr[r, k])}")
    out = np.empty((T, K), dtype=np.int64)
    for k in range(K):
        out[:, k] = arr[k:k + T, k]
    return AcousticGrid(out)


def head_targets(delayed: DelayedGrid, step: int) -> np.ndarray:
    """Row ``step`` (1-based decoder step) of the delayed grid."""
    if not 1 <= step <= delayed.rows:
        raise IndexError(f"step {step} outside [1, {delayed.rows}]")
    return delayed.tokens[step - 1].copy()
