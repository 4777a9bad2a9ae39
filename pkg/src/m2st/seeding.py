"""Deterministic RNG stream derivation.

Every random draw in the package comes from ``stream(root_seed, name, *indices)``:
the component name is hashed (crc32, stable across platforms and runs) and mixed
with the indices into a ``SeedSequence`` driving a counter-based Philox
generator. Serial and parallel executions therefore see the same streams.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_seed(root: int, name: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode()), *map(int, indices)])


def stream(root: int, name: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(stream_seed(root, name, *indices)))


def child_seed(root: int, name: str, *indices: int) -> int:
    """A plain integer seed for a named sub-component (for echoing into outputs)."""
    return int(stream_seed(root, name, *indices).generate_state(1)[0])
