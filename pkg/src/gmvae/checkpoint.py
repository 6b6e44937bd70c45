"""Binary model checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"GMVAECK1"
    u32       length L of the config block
    L bytes   GMVAEConfig as UTF-8 JSON (sorted keys)
    u32       number of tensors N
    N times:
      u32       name length, then that many UTF-8 name bytes
      u32       rank R, then R x u32 extents
      prod(extents) x f64 values, row-major
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import GMVAE, GMVAEConfig

MAGIC = b"GMVAECK1"


def encode_checkpoint(model: GMVAE) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> GMVAE:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("not a gmvae checkpoint (bad magic)")
    (n_cfg,) = struct.unpack("<I", take(4))
    try:
        config = GMVAEConfig.from_dict(json.loads(take(n_cfg)))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    model = GMVAE(config, init="zeros")
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        try:
            name = take(n_name).decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name before byte {pos} is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes in checkpoint")
    if set(state) != set(model.params):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return model


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: GMVAE, path) -> None:
    atomic_write(path, encode_checkpoint(model))


def load_checkpoint(path) -> GMVAE:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf)
