"""Deterministic seed derivation.

Every stage of the pipeline derives its own RNG stream from a master seed
and a stage name, so renaming or reordering one stage never perturbs the
randomness of any other.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(master_seed: int, *names: str) -> int:
    """Derive a child seed from a master seed and one or more labels.

    The derivation is a SHA-256 hash of the master seed and the labels,
    truncated to 63 bits, so it is stable across platforms and sessions.
    """
    h = hashlib.sha256()
    h.update(str(int(master_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def rng_from(master_seed: int, *names: str) -> np.random.Generator:
    """A fresh Generator seeded from `derive_seed(master_seed, *names)`."""
    return np.random.default_rng(derive_seed(master_seed, *names))


def rng_state_to_json(rng: np.random.Generator) -> str:
    """Serialize a Generator's bit-generator state to a JSON string."""
    return json.dumps(rng.bit_generator.state)


def rng_from_json(state: str) -> np.random.Generator:
    """Restore a Generator from a state produced by `rng_state_to_json`."""
    payload = json.loads(state)
    rng = np.random.default_rng(0)
    if payload["bit_generator"] != type(rng.bit_generator).__name__:
        bitgen = getattr(np.random, payload["bit_generator"])()
        rng = np.random.Generator(bitgen)
    rng.bit_generator.state = payload
    return rng
