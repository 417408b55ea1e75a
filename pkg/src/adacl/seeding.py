"""Deterministic seed derivation and content hashing.

Every random decision in the engine draws from a generator seeded through
``derive_seed``, which hashes a label plus integer context (master seed,
task index, trial id) with sha256. Child streams are therefore stable
across runs, platforms, and call order, which is what makes single-worker
runs byte-identical end to end.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Derive a 64-bit seed from a sequence of labels and integers.

    Parts are type-tagged before hashing so ``("1",)`` and ``(1,)`` yield
    different streams.
    """
    tokens = []
    for part in parts:
        if isinstance(part, bool) or not isinstance(part, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(part).__name__}")
        tag = "i" if isinstance(part, int) else "s"
        tokens.append(f"{tag}:{part}")
    digest = hashlib.sha256("/".join(tokens).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def spawn_rng(*parts: int | str) -> np.random.Generator:
    """Return a fresh generator for the stream identified by ``parts``."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def content_digest(*arrays: np.ndarray) -> str:
    """Hash array contents (dtype, shape, and bytes) to a hex digest.

    Used for example-identity checks (split disjointness) and for
    order-invariant subsampling, where sorting by digest removes any
    dependence on input ordering.
    """
    h = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
