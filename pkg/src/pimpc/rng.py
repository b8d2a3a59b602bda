"""Reproducible noise streams built on the Philox counter-based generator.

Every random draw in the library is addressed by a seed plus a tuple of
integer coordinates (stream purpose, control cycle, optimization iteration,
...).  The coordinates are hashed into a Philox key, so a given draw is a
pure function of (seed, coordinates, array position) and is identical no
matter how many workers consume it or in which order.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox
from numpy.typing import NDArray

_MASK64 = (1 << 64) - 1

# Stream purposes; keep values stable, they are part of reproducibility.
STREAM_CONTROL = 1
STREAM_DYNAMICS = 2
STREAM_GENERIC = 3


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mix function (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *coords: int) -> tuple[int, int]:
    """Hash (seed, *coords) into a 128-bit Philox key.

    Coordinates may be any non-negative python ints; the chain mixes each
    one so that distinct tuples give unrelated keys.
    """
    h = splitmix64(int(seed) & _MASK64)
    for c in coords:
        h = splitmix64(h ^ (int(c) & _MASK64))
    k0 = splitmix64(h)
    k1 = splitmix64(h ^ 0xA5A5A5A5A5A5A5A5)
    return k0, k1


def stream(seed: int, *coords: int) -> Generator:
    """A fresh Generator for the stream addressed by (seed, *coords)."""
    k0, k1 = derive_key(seed, *coords)
    return Generator(Philox(key=np.array([k0, k1], dtype=np.uint64)))


def normal_block(
    seed: int,
    coords: tuple[int, ...],
    shape: tuple[int, ...],
    dtype=np.float64,
) -> NDArray:
    """Standard-normal array for the given stream address.

    The array layout is fixed, so entry [i, j, ...] is fully determined by
    (seed, coords, i, j, ...).
    """
    return stream(seed, *coords).standard_normal(shape, dtype=dtype)
