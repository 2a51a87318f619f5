"""Counter-based random generator for reproducible simulation demos.

Drawing is a pure function of ``(seed, *path)`` — no sequential state — so
any implementation in any language can reproduce a run bit for bit. The
construction: absorb the seed and then each path word into a running hash
with the SplitMix64 finalizer,

    h0 = mix64(seed + GOLDEN)
    h  = mix64(h ^ (word + GOLDEN))      for each path word in order

where ``mix64`` is

    x ^= x >> 30;  x *= 0xbf58476d1ce4e5b9  (mod 2^64)
    x ^= x >> 27;  x *= 0x94d049bb133111eb  (mod 2^64)
    x ^= x >> 31

and GOLDEN = 0x9e3779b97f4a7c15. Uniforms are the final hash divided by
2^64; Poisson draws invert the CDF with a single uniform.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    x &= _MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK
    x ^= x >> 31
    return x


def draw_u64(seed: int, *path: int) -> int:
    h = mix64(seed + _GOLDEN)
    for word in path:
        h = mix64(h ^ ((word + _GOLDEN) & _MASK))
    return h


def uniform(seed: int, *path: int) -> float:
    """One uniform in [0, 1) for the given counter path."""
    return draw_u64(seed, *path) / 2.0**64


def poisson(u: float, lam: float) -> int:
    """Poisson draw by CDF inversion from a single uniform."""
    if lam <= 0.0:
        return 0
    p = math.exp(-lam)
    cum = p
    k = 0
    while u >= cum and k < 100_000:
        k += 1
        p *= lam / k
        cum += p
    return k
