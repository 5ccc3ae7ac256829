"""Seed plumbing.

One run seed fans out into independent named streams (``split``, ``init``,
``dropout``, ``phantom``, ``batch``, ...).  Each stream seeds numpy's PCG64
through ``SeedSequence([seed, crc32(name)])``, so adding a stream never
perturbs the others.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(seed: int, stream: str) -> int:
    """A 63-bit seed for ``stream`` under run ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def numpy_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, stream)))


def torch_generator(seed: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, stream))
    return g
