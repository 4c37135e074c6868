"""Named random sub-streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np
import torch


def stream_seed(seed: int, name: str, *extra: int) -> int:
    seq = np.random.SeedSequence([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def numpy_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name, *extra))


def torch_stream(seed: int, name: str, *extra: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(seed, name, *extra))
    return gen
