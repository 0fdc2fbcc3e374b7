"""Seeded, splittable random streams.

All randomness in a run flows from a single integer seed. Named child streams
are derived with ``numpy.random.SeedSequence`` spawn keys and drive a Philox
(counter-based) bit generator, so adding a new consumer never perturbs the
draws seen by existing ones.
"""

import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A reproducible random stream addressed by ``(seed, path)``."""

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, name):
        """Independent child stream; same (seed, path, name) always replays."""
        return Rng(self.seed, self.path + (str(name),))

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def random(self, size=None):
        return self.gen.random(size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
