"""Named deterministic random streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, tag: str) -> np.random.Generator:
    """Generator that depends only on ``(seed, tag)``.

    >>> stream(0, "synth").integers(1 << 30) == stream(0, "synth").integers(1 << 30)
    True
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *_tag_words(tag)])))
