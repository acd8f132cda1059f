"""Named random streams derived from one master seed.

Each consumer asks for its own stream by name, so adding a consumer never
shifts the numbers another consumer sees.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, name)))
