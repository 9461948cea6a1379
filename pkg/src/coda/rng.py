"""Named, seedable random streams on a counter-based generator.

Every stochastic site in the pipeline (weight init, batch sampling,
corruption noise, prompt placement) draws from its own labeled stream, so
changing one site's consumption never perturbs another. Streams are Philox
generators keyed by a hash of (seed, label path); the same (seed, labels)
always yields the same stream, and distinct labels yield independent ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_for(seed: int, labels: tuple[str, ...]) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(label.encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed: int, *labels: str) -> np.random.Generator:
    """Return the generator for the given seed and label path."""
    if not labels:
        raise ValueError("rng stream needs at least one label")
    return np.random.Generator(np.random.Philox(key=_key_for(seed, labels)))


def split(gen_seed: int, *labels: str) -> int:
    """Derive a child seed from a parent seed and labels (for nested sites)."""
    return _key_for(gen_seed, labels) % (2**63)


def state_of(gen: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's internal state."""
    st = gen.bit_generator.state
    return {
        "counter": [int(x) for x in st["state"]["counter"]],
        "key": [int(x) for x in st["state"]["key"]],
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore(snapshot: dict) -> np.random.Generator:
    """Rebuild a generator from a state_of() snapshot."""
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(snapshot["counter"], dtype=np.uint64),
            "key": np.array(snapshot["key"], dtype=np.uint64),
        },
        "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
        "buffer_pos": snapshot["buffer_pos"],
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return np.random.Generator(bg)
