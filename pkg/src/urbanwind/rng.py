"""Named deterministic random streams.

A stream is identified by an integer seed plus a name (and optional integer
keys), so independent consumers (weight init, dropout, shuffling, trial
sampling) never share state and can be replayed in any order.
"""
import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _name_key(name), *map(int, keys)])))


def derive_seed(base_seed: int, *keys: int) -> int:
    """Stable 31-bit seed derived from ``base_seed`` and integer keys."""
    state = np.random.SeedSequence([int(base_seed), *map(int, keys)]).generate_state(1, dtype=np.uint32)
    return int(state[0] >> 1)


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = state
