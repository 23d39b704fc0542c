"""Deterministic, splittable random streams.

Every stochastic operation in this package draws from a counter-based
generator addressed by an immutable :class:`RngKey` = (root seed, path).
Deriving a child key with :func:`split` is a pure function, so replicated
work items can run in any order, or on any thread, without changing
results.  There is no global RNG state anywhere in the package.

A key should be consumed by exactly one sampling call; callers derive a
fresh child key per draw site.  Two keys with different paths give
streams that are independent for practical purposes (distinct 128-bit
Philox cipher keys derived by hashing the path).

Gaussian variates are produced by inverse-CDF transform of 53-bit
uniforms.  This choice is fixed: stored reference outputs depend on it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

_DOMAIN = b"flipout.rng.v1"
_U64 = 1 << 64
_U53 = 1 << 53


@dataclass(frozen=True)
class RngKey:
    """Immutable handle addressing one random stream.

    Attributes
    ----------
    root_seed : int
        64-bit unsigned experiment seed.
    path : tuple of int
        Stream indices appended by :func:`split`, each 64-bit unsigned.
    """

    root_seed: int
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= self.root_seed < _U64:
            raise ValueError("root_seed must be a 64-bit unsigned integer")
        if any(not 0 <= p < _U64 for p in self.path):
            raise ValueError("path entries must be 64-bit unsigned integers")


def key(root_seed: int) -> RngKey:
    """Make a root key from an integer seed."""
    return RngKey(int(root_seed), ())


def split(k: RngKey, index: int) -> RngKey:
    """Derive the child key with `index` appended to the path.

    Pure: calling twice with the same arguments yields identical keys.
    """
    return RngKey(k.root_seed, k.path + (int(index),))


def generator(k: RngKey) -> Generator:
    """A fresh counter-based generator positioned at the start of `k`'s stream.

    The Philox cipher key is the first 128 bits of
    SHA-256(domain || root_seed || path), so distinct paths address
    disjoint streams.  The returned generator is local mutable state for
    the caller; nothing global is touched.
    """
    h = hashlib.sha256()
    h.update(_DOMAIN)
    h.update(k.root_seed.to_bytes(8, "big"))
    for p in k.path:
        h.update(p.to_bytes(8, "big"))
    cipher_key = np.frombuffer(h.digest()[:16], dtype=np.uint64)
    return Generator(Philox(key=cipher_key))


def sample_uniform(k: RngKey, shape) -> np.ndarray:
    """Uniform floats strictly inside (0, 1) with 53-bit resolution."""
    g = generator(k)
    u = g.integers(0, _U53, size=shape, dtype=np.uint64)
    return (u.astype(np.float64) + 0.5) / _U53


def sample_gaussian(k: RngKey, shape) -> np.ndarray:
    """I.i.d. standard-normal entries, via inverse CDF of 53-bit uniforms."""
    return ndtri(sample_uniform(k, shape))


def sample_signs(k: RngKey, shape) -> np.ndarray:
    """Entries drawn uniformly from {-1.0, +1.0} (stored as float64).

    One raw generator word feeds 64 signs, so drawing the per-example
    sign matrices costs far less than the matrix products they feed.
    """
    n = int(np.prod(shape, dtype=np.int64))
    if n == 0:
        return np.empty(shape, dtype=np.float64)
    g = generator(k)
    words = g.bit_generator.random_raw((n + 63) // 64)
    bits = np.unpackbits(words.view(np.uint8), count=n)
    return (2.0 * bits - 1.0).reshape(shape)
