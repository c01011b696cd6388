"""Deterministic RNG derivation.

Every random draw in the package flows from a root seed through
``spawn_rng(root, *tags)``; tags name the consumer (and, where relevant,
its content) so adding or reordering unrelated draws never perturbs an
existing stream.
"""

import zlib

import numpy as np


def _tag_to_int(tag):
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def spawn_rng(root_seed, *tags):
    """A numpy Generator keyed by (root_seed, tags...)."""
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(root_seed, *tags):
    """A 63-bit integer seed keyed the same way (for storing in configs)."""
    return int(spawn_rng(root_seed, *tags).integers(0, 2**63))
