"""Checkpoint tensor container: named arrays as little-endian float32.

Layout (all integers little-endian):

    magic   b"DLCT"
    version u8 (= 1)
    count   u32
    entry*  u16 name length, utf-8 name, u8 ndim, u32 * ndim dims,
            float32 raw data (C order)

Integer state (e.g. batch-norm step counters) is stored as float32; the
values involved are small counts, so the round trip is exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DLCT"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<BI", VERSION, len(tensors))
    for name, tensor in tensors.items():
        data = tensor.detach().cpu().contiguous()
        arr = data.numpy().astype("<f4", copy=False)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_tensors(path: str | Path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    offset = 9
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += 4 * numel
        out[name] = torch.from_numpy(arr.copy())
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in tensor container")
    return out


def save_module(path: str | Path, module: torch.nn.Module) -> None:
    save_tensors(path, {k: v.to(torch.float32) for k, v in module.state_dict().items()})


def load_module(path: str | Path, module: torch.nn.Module) -> None:
    """Restore a module's state in place, casting back to the stored dtypes."""
    loaded = load_tensors(path)
    state = module.state_dict()
    if set(loaded) != set(state):
        missing = set(state) ^ set(loaded)
        raise ValueError(f"{path}: state mismatch, offending keys {sorted(missing)}")
    for key in state:
        if tuple(loaded[key].shape) != tuple(state[key].shape):
            raise ValueError(
                f"{path}: {key} has shape {tuple(loaded[key].shape)}, "
                f"module expects {tuple(state[key].shape)}"
            )
    module.load_state_dict({k: loaded[k].to(state[k].dtype) for k in state})
