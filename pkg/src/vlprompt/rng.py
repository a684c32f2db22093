"""splitmix64-seeded xoshiro256** generator.

Parameter initialisation and soft-prompt initialisation draw from this
generator so that identical seeds give bitwise-identical tensors on any
platform.
"""
import math

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    """xoshiro256** with a splitmix64 seeding routine.

    Normals use the Box-Muller transform on two 53-bit uniforms; the sine
    branch is cached and returned by the next call.
    """

    def __init__(self, seed):
        seed = int(seed) & _MASK
        s = []
        for _ in range(4):
            seed, out = splitmix64(seed)
            s.append(out)
        self._s = s
        self._spare = None

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self):
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def standard_normal_scalar(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normal(self, shape, std=1.0):
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        draw = self.standard_normal_scalar
        for i in range(n):
            out[i] = draw()
        return (out * std).reshape(shape)

    def integers(self, high):
        """Uniform integer in ``[0, high)`` by rejection (no modulo bias)."""
        if high <= 0:
            raise ValueError("high must be positive")
        limit = _MASK - (_MASK % high) - 1
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % high

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


def derive_seed(*parts):
    """Mix integers into one 64-bit seed with splitmix64."""
    state = 0x243F6A8885A308D3
    for p in parts:
        state, out = splitmix64((state ^ (int(p) & _MASK)) & _MASK)
        state = out
    return state
