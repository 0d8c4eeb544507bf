"""Stateless counter-based random numbers.

Every random quantity in the package is a pure function of a 64-bit key
built by hashing integers together, so results do not depend on call order
or on how work is split between processes.
"""

import math

import numpy as np
from numba import njit

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S6 = np.uint64(6)
_S2 = np.uint64(2)
_INV53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


@njit(cache=True)
def mix64(z):
    """splitmix64 finalizer."""
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def zigzag(v):
    """Map a signed int64 to a distinct uint64."""
    v = np.int64(v)
    if v >= 0:
        return np.uint64(2 * v)
    return np.uint64(-2 * v - 1)


@njit(cache=True)
def combine(h, v):
    """Fold the integer ``v`` into the hash ``h``."""
    return mix64(h ^ (zigzag(v) + _GOLDEN + (h << _S6) + (h >> _S2)))


@njit(cache=True)
def seed_key(seed):
    return mix64(zigzag(seed) ^ _GOLDEN)


@njit(cache=True)
def uniform(h):
    """Uniform on the open interval (0, 1)."""
    return (float(mix64(h) >> _S11) + 0.5) * _INV53


@njit(cache=True)
def normal(h):
    """Standard normal via Box-Muller from two derived uniforms."""
    h1 = mix64(h)
    h2 = mix64(h1 ^ _GOLDEN)
    u1 = (float(h1 >> _S11) + 0.5) * _INV53
    u2 = float(h2 >> _S11) * _INV53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)


def key_of(*values):
    """Python-side helper: hash a sequence of integers into one key."""
    h = seed_key(values[0])
    for v in values[1:]:
        h = combine(h, v)
    return h
