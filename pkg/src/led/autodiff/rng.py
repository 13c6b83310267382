"""Seeded random streams.

Every consumer draws from its own named sub-stream so that, for example,
changing the number of initialisation draws never shifts the reparameterisation
noise. Streams are numpy ``PCG64`` generators keyed by
``SeedSequence([seed, crc32(name)])``; the bit stream of PCG64 is fixed and
platform independent.
"""

import zlib

import numpy as np

STREAMS = ("init", "data-shuffle", "reparam-noise", "mask-choice")


def _stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Root seed plus lazily created named generators."""

    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._streams = {}

    def stream(self, name):
        """Generator for ``name``; repeated calls continue the same stream."""
        gen = self._streams.get(name)
        if gen is None:
            gen = self._streams[name] = self.fresh(name)
        return gen

    def fresh(self, name):
        """A new generator at the start of stream ``name`` (not cached)."""
        ss = np.random.SeedSequence([self.seed, _stream_key(name)])
        return np.random.Generator(np.random.PCG64(ss))

    def get_state(self):
        return {
            "seed": self.seed,
            "streams": {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())},
        }

    def set_state(self, state):
        self.seed = int(state["seed"])
        self._streams = {}
        for name, bg_state in state["streams"].items():
            gen = self.fresh(name)
            gen.bit_generator.state = bg_state
            self._streams[name] = gen

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"])
        rng.set_state(state)
        return rng
