"""
Keyed counter-based randomness for DARE.

Every (seed, stream, tensor name) triple gets its own Philox key, and the draw
for flat index i is the i-th output of that keyed stream. Results therefore do
not depend on the order in which tensors are visited or on the thread count.
"""

import hashlib
from typing import Sequence

import numpy as np


def derive_key(seed: int, stream: int, name: str) -> int:
    """128-bit Philox key from the run seed, a stream number (expert index) and a tensor name."""
    material = f"{int(seed)}\x1f{int(stream)}\x1f{name}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "little")


def keyed_generator(seed: int, stream: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, stream, name)))


def keyed_uniforms(seed: int, stream: int, name: str, shape: Sequence[int]) -> np.ndarray:
    """Uniform [0, 1) draws laid out row-major over ``shape``."""
    size = int(np.prod(shape))
    return keyed_generator(seed, stream, name).random(size).reshape(tuple(shape))
