"""Binary checkpoint format.

Layout (little-endian)::

    b"AGNC" | u32 version=1 | u32 count
    count x ( u16 name_len | utf-8 name | u8 rank | u32 dims[rank] | f32 data )
    u32 crc32 of every preceding byte

The model configuration travels as an ordinary entry named ``meta.config``.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import CorruptCheckpointError
from .model import AGN, ModelConfig, ParamStore, build
from .tensor import Tensor

MAGIC = b"AGNC"
VERSION = 1
CONFIG_ENTRY = "meta.config"


def encode(entries: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("magic", f"expected {MAGIC!r}")
    if len(blob) < 16:
        raise CorruptCheckpointError("checksum", "file truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != VERSION:
        raise CorruptCheckpointError("version", f"expected {VERSION}, got {version}")
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum", "CRC32 mismatch")
    (count,) = struct.unpack_from("<I", body, 8)
    off = 12
    entries = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(body):
                raise CorruptCheckpointError("payload", f"tensor {name!r} overruns file")
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            entries.append((name, arr.astype(np.float32)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError("payload", str(exc)) from exc
    if off != len(body):
        raise CorruptCheckpointError("payload", f"{len(body) - off} trailing bytes")
    return entries


def save_checkpoint(params: ParamStore, path, config: ModelConfig | None = None) -> None:
    entries = [(name, t.data) for name, t in params.items()]
    if config is not None:
        entries.append((CONFIG_ENTRY, config.to_vector()))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(entries))
    os.replace(tmp, path)


def read_entries(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_checkpoint(path) -> ParamStore:
    """Parameters only; a stored configuration entry is skipped."""
    return ParamStore({name: Tensor(arr, requires_grad=True)
                       for name, arr in read_entries(path) if name != CONFIG_ENTRY})


def save_model(model: AGN, path) -> None:
    save_checkpoint(model.params, path, model.config)


def load_model(path) -> AGN:
    entries = read_entries(path)
    meta = [arr for name, arr in entries if name == CONFIG_ENTRY]
    if not meta:
        raise CorruptCheckpointError("config", f"no {CONFIG_ENTRY} entry")
    config = ModelConfig.from_vector(meta[0])
    store = ParamStore({name: Tensor(arr, requires_grad=True)
                        for name, arr in entries if name != CONFIG_ENTRY})

    _, reference = build(config)
    if reference.shapes() != store.shapes():
        raise CorruptCheckpointError("config", "parameter layout does not match stored config")
    return AGN(config, store)
