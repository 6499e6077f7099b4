"""Seed derivation helpers.

A single master seed fans out into independent substreams keyed by a domain
name plus integer indices. Derivation is positional (SeedSequence spawn keys),
so adding new domains or grid cells never perturbs existing streams.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "rng_for", "counter_rng", "derive_seed"]


def _domain_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(master_seed: int, domain: str, *indices: int) -> np.random.SeedSequence:
    """SeedSequence for (master, domain, indices); stable across runs."""
    return np.random.SeedSequence(master_seed, spawn_key=(_domain_key(domain), *indices))


def rng_for(master_seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Default generator (PCG64) on the derived substream."""
    return np.random.default_rng(substream(master_seed, domain, *indices))


def counter_rng(master_seed: int, domain: str, *indices: int) -> np.random.Generator:
    """Counter-based generator (Philox) for replayable stepwise streams."""
    return np.random.Generator(np.random.Philox(substream(master_seed, domain, *indices)))


def derive_seed(master_seed: int, domain: str, *indices: int) -> int:
    """Plain integer seed for APIs that take one."""
    return int(substream(master_seed, domain, *indices).generate_state(1, np.uint64)[0])
