"""Deterministic seed derivation.

Every random stream in the package is derived from one root seed plus a
tag path, so rerunning any single component reproduces its stream exactly.
"""

import hashlib

import numpy as np


def child_seed(seed, *tags):
    """Derive a stable 64-bit seed from a root seed and a tag path."""
    text = str(int(seed)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed, *tags):
    """A fresh numpy Generator for the given root seed and tag path."""
    return np.random.default_rng(child_seed(seed, *tags))
