"""Counter-based random streams keyed by (seed, purpose) with one block per path.

Path ``p`` of a stream always reads the same Philox counter block, so draws for
a path never depend on how many other paths are requested or in which chunk
they are generated.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

# purpose tags; the high 64 bits of the Philox key
MARKET = 1
ACTIONS = 2
STATE_SAMPLER = 3
CONTINUATION = 4
INIT = 5
SHUFFLE = 6
MISC = 7

_MASK64 = (1 << 64) - 1


def _key(seed: int, tag: int, sub: int = 0) -> int:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    hi = ((tag & 0xFFFF) << 48) | (sub & ((1 << 48) - 1))
    return (seed & _MASK64) | (hi << 64)


def path_raw(seed, tag, per_path, first_path, n_paths, sub=0):
    """Raw uint64 words, shape (n_paths, per_path), path-addressable."""
    blocks = -(-per_path // 4)
    bitgen = np.random.Philox(key=_key(seed, tag, sub))
    if first_path:
        bitgen.advance(first_path * blocks)
    raw = bitgen.random_raw(n_paths * blocks * 4)
    return raw.reshape(n_paths, blocks * 4)[:, :per_path]


def path_uniforms(seed, tag, per_path, n_paths, first_path=0, sub=0):
    """Uniforms on the open interval (0, 1)."""
    raw = path_raw(seed, tag, per_path, first_path, n_paths, sub)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def path_normals(seed, tag, per_path, n_paths, first_path=0, sub=0):
    """Standard normals by inversion, one independent row per path."""
    return ndtri(path_uniforms(seed, tag, per_path, n_paths, first_path, sub))


def generator(seed, tag, sub=0) -> np.random.Generator:
    """Sequential generator for non path-indexed draws (initialisation, shuffles)."""
    return np.random.Generator(np.random.Philox(key=_key(seed, tag, sub)))
