"""Counter-based random streams.

Every consumer gets a generator keyed by ``(seed, stream)`` and positioned by
an integer index, so batch ``i`` draws the same numbers regardless of what
other batches or workers did before it.
"""
from __future__ import annotations

import hashlib

import numpy as np

STREAM_TRAIN_BATCH = 1
STREAM_EVAL_SUBSET = 2
STREAM_INIT = 3


def stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    key = (int(seed) % (1 << 64)) | (int(stream) % (1 << 64)) << 64
    # the index occupies the upper counter words, leaving 2**128 draws per index
    return np.random.Generator(np.random.Philox(key=key, counter=int(index) << 128))


def derive_seed(master: int, *labels) -> int:
    """Deterministic child seed for a named stage."""
    ss = np.random.SeedSequence([int(master) % (1 << 63)] + [_label(x) for x in labels])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def _label(x) -> int:
    if isinstance(x, int):
        return x % (1 << 63)
    return int.from_bytes(hashlib.sha256(str(x).encode()).digest()[:8], "little") >> 1
