"""Named, splittable deterministic random streams.

Every stochastic consumer in the package (weight init, dropout masks, patch
sampling, MC-dropout passes, dataset synthesis) derives its own stream from a
root seed and a path of names.  Derivation is stateless: the same
``(seed, path)`` always yields the same generator, no matter how many other
streams were created or in which order they were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _key_word(part) -> int:
    """Map one path element to a stable 64-bit word (SHA-256 based)."""
    if isinstance(part, (int, np.integer)):
        tag = f"i:{int(part)}"
    elif isinstance(part, str):
        tag = f"s:{part}"
    else:
        raise TypeError(f"rng path elements must be str or int, got {type(part).__name__}")
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A node in a tree of derived random streams.

    ``child(*names)`` descends the tree; ``generator()`` returns a fresh
    ``numpy.random.Generator`` whose state depends only on the root seed and
    the path, so repeated calls restart the identical sequence.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = _path

    def child(self, *names) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(names))

    def generator(self) -> np.random.Generator:
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_key_word(p) for p in self.path]
        return np.random.default_rng(np.random.SeedSequence(entropy))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={'/'.join(map(str, self.path))})"
