"""Binary checkpoint container and parameter hashing.

Layout (all integers little-endian):

    magic            8 bytes  b"UNILDIFF"
    format_version   u32      1
    meta_len         u64
    meta             JSON, UTF-8, canonical (sorted keys, compact)
    param_count      u32
    per parameter, sorted by name:
        name_len     u16
        name         UTF-8
        ndim         u8
        dims         ndim x u64
        data         float32 raw bytes

The metadata carries the flat config snapshot, its hash, the stage, the
global step, and the master seed. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"UNILDIFF"
FORMAT_VERSION = 1


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed derived from the master seed and context labels."""
    text = ":".join([str(master), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def config_hash(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()


def parameter_checksum(source) -> str:
    """SHA-256 over the named float32 tensors of a module or state dict."""
    state = source.state_dict() if isinstance(source, torch.nn.Module) else source
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, params: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<Q", len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        data = params[name].detach().cpu().numpy().astype("<f4")
        name_bytes = name.encode()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic {raw[:8]!r})")
    offset = 8
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    (meta_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    meta = json.loads(raw[offset:offset + meta_len].decode())
    offset += meta_len
    if "config" in meta and "config_hash" in meta:
        text = "\n".join(f"{k} = {v}" for k, v in sorted(meta["config"].items())) + "\n"
        if config_hash(text) != meta["config_hash"]:
            raise ValueError(f"{path}: config snapshot does not match its stored hash")
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, offset) if ndim else ()
        offset += 8 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        params[name] = torch.from_numpy(arr.copy())
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return meta, params
