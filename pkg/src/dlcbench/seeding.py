"""Deterministic seed derivation and bitwise parameter checksums.

Every source of randomness in a run pulls from its own generator whose
seed is derived from the run seed plus a label path. The derivation is
hash-based, so adding or removing one consumer never perturbs another.
That property is what makes the plug-and-play contract testable: the
plugin/gate streams are separate from the ones the base method uses.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *parts) -> int:
    """Derive an independent 63-bit seed from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def param_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in sorted state-dict order."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
