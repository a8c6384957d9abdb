"""Deterministic binary checkpoints.

Layout (all integers unsigned 32-bit little-endian)::

    b"KNEUR01"
    n_layers d_model d_ffn n_heads vocab_size max_seq_len seed
    n_tensors
    repeated n_tensors times, in ``param_names`` order:
        name_len, name (UTF-8), rank, dims[rank], float32 LE data (row-major)
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import MaskedLM, ModelConfig

MAGIC = b"KNEUR01"
_CONFIG_FIELDS = ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_seq_len", "seed")


def to_bytes(model: MaskedLM) -> bytes:
    cfg = model.config
    parts = [MAGIC, struct.pack("<7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> MaskedLM:
    if not buf.startswith(MAGIC):
        raise ConfigError("not a KNEUR01 checkpoint")
    off = len(MAGIC)
    values = struct.unpack_from("<7I", buf, off)
    off += 28
    cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, values)))
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise ConfigError(f"trailing bytes in checkpoint ({len(buf) - off})")
    return MaskedLM(cfg, params)


def save(model: MaskedLM, path: str | Path) -> str:
    """Write ``model`` to ``path``; returns the SHA-256 of the file contents."""
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> MaskedLM:
    return from_bytes(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
