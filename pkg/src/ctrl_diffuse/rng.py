"""Deterministic random-stream derivation.

A stream is identified by ``(master_seed, purpose_tag, index)``. The tag is
hashed with SHA-256 and its first four 32-bit words, followed by ``index``,
form the ``spawn_key`` of a :class:`numpy.random.SeedSequence` whose entropy
is ``master_seed``. The generator is PCG64. Any implementation that follows
this recipe draws the same number of variates per stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import CtrlDiffuseError


class StreamReuseError(CtrlDiffuseError):
    pass


def _tag_words(tag: str) -> tuple[int, ...]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[4 * k : 4 * k + 4], "little") for k in range(4))


def rng_stream(master_seed: int, purpose_tag: str, index: int = 0) -> np.random.Generator:
    if index < 0:
        raise ValueError("stream index must be nonnegative")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=_tag_words(purpose_tag) + (int(index),))
    return np.random.Generator(np.random.PCG64(seq))


class StreamRegistry:
    """Issues streams for one run and refuses to hand out a ``(tag, index)`` twice."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._issued: set[tuple[str, int]] = set()

    def stream(self, purpose_tag: str, index: int = 0) -> np.random.Generator:
        key = (purpose_tag, int(index))
        if key in self._issued:
            raise StreamReuseError(f"random stream {key} already issued in this run")
        self._issued.add(key)
        return rng_stream(self.master_seed, purpose_tag, index)

    @property
    def issued(self) -> frozenset:
        return frozenset(self._issued)
