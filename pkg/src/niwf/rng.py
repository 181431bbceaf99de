"""Seeded, splittable random streams.

Philox is counter-based, so its output for a given key and counter is the
same on every platform. Child streams are derived from ``(seed, *labels)``
through :class:`numpy.random.SeedSequence`, which keeps independent consumers
(shuffling, anchor sampling, initialisation) from perturbing each other.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


class Rng:
    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = tuple(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_label_key(s) for s in self.stream))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.stream + labels)

    # -- draws (all float outputs are float32) ---------------------------
    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(np.float32)

    def standard_normal64(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    # -- persistence ---------------------------------------------------------
    def state(self) -> dict:
        bg = self._gen.bit_generator.state
        st = bg["state"]
        return {
            "seed": self.seed,
            "stream": [s if isinstance(s, int) else str(s) for s in self.stream],
            "counter": [int(v) for v in st["counter"]],
            "key": [int(v) for v in st["key"]],
            "buffer": [int(v) for v in bg["buffer"]],
            "buffer_pos": int(bg["buffer_pos"]),
            "has_uint32": int(bg["has_uint32"]),
            "uinteger": int(bg["uinteger"]),
        }

    @classmethod
    def from_state(cls, d: dict) -> "Rng":
        r = cls(d["seed"], tuple(d["stream"]))
        r._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(d["counter"], dtype=np.uint64),
                "key": np.array(d["key"], dtype=np.uint64),
            },
            "buffer": np.array(d["buffer"], dtype=np.uint64),
            "buffer_pos": d["buffer_pos"],
            "has_uint32": d["has_uint32"],
            "uinteger": d["uinteger"],
        }
        return r
