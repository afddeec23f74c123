"""Hierarchical seed derivation.

A single master seed is split into independent streams by hashing a path of
labels, so that e.g. dataset noise, weight init, per-step training noise and
per-scene eval noise never collide and ablation variants can share identical
data and initial weights.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def seed_for(master: int, *path: int | str) -> int:
    """Derive a 63-bit child seed from a master seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def np_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
