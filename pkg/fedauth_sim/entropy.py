# Seeded randomness for a whole simulation run

import threading
import zlib

import numpy as np


class Entropy:
    """Single seeded source of every random value in a simulation.

    Nonces, salts, pseudonyms, key seeds and prime candidates are all drawn
    from here, so one seed fixes the whole event log. Access is serialized so
    the concurrent benchmark mode can share it between workers.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)
        self._lock = threading.Lock()

    def token_bytes(self, nbytes=16):
        with self._lock:
            return self._rng.bytes(nbytes)

    def token_hex(self, nbytes=16):
        return self.token_bytes(nbytes).hex()

    def randbits(self, bits):
        nbytes = (bits + 7) // 8
        value = int.from_bytes(self.token_bytes(nbytes), "big")
        return value >> (nbytes * 8 - bits)

    def randbelow(self, upper):
        """Uniform int in [0, upper), by rejection sampling"""
        if upper <= 0:
            raise ValueError("upper must be positive")
        bits = max(upper.bit_length(), 1)
        while True:
            value = self.randbits(bits)
            if value < upper:
                return value

    def choice(self, options):
        options = list(options)
        return options[self.randbelow(len(options))]

    def generator(self, label):
        """Return an independent numpy Generator for a named stream.

        Streams are keyed by (seed, label), so a stream's values don't depend
        on how many other draws happened before it was created.
        """
        key = zlib.crc32(str(label).encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(key,)))
