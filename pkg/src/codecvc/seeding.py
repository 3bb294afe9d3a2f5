"""Seed derivation.

Every random stream is seeded from the single configured seed with
``derive_seed(seed, *names)``: the first 8 bytes (big-endian) of
SHA-256 over ``"<seed>/<name1>/<name2>/..."``, masked to 63 bits.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, *names) -> int:
    key = "/".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def numpy_rng(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))


def torch_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *names))
    return g
