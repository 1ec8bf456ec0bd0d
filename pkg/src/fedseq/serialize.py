"""Binary checkpoint format for model parameters.

Layout, all integers little-endian:

    magic   4 bytes  b"FEDW"
    version u16      currently 1
    dims    5 x u32  vocab_in, vocab_out, embed_dim, hidden_dim, attention_dim
    count   u32      number of named tensors
    tensor  repeated: name_len u16, name utf-8, ndim u8, shape u32 each,
                      data float64
    crc32   u32      of every preceding byte

Values travel as exact float64, so a round trip is bitwise. Corruption is
detected by the trailing checksum; magic/version mismatches and short reads
raise their own error types so callers can tell the cases apart.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelDims, ModelParams

MAGIC = b"FEDW"
VERSION = 1


class SerializationError(Exception):
    """Base class for checkpoint encode/decode failures."""


class BadMagicError(SerializationError):
    """The file does not start with the checkpoint magic."""


class BadVersionError(SerializationError):
    """The checkpoint was written by an unsupported format version."""


class ChecksumError(SerializationError):
    """The payload does not match its trailing crc32."""


class TruncatedError(SerializationError):
    """The data ends before the declared structure is complete."""


def params_to_bytes(params: ModelParams) -> bytes:
    d = params.dims
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<5I", d.vocab_in, d.vocab_out, d.embed_dim, d.hidden_dim,
                          d.attention_dim))
    named = params.named_arrays()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise TruncatedError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.offset + n}"
            )
        piece = self.blob[self.offset : self.offset + n]
        self.offset += n
        return piece

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def params_from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < len(MAGIC):
        raise TruncatedError(f"checkpoint holds only {len(blob)} bytes")
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {blob[:len(MAGIC)]!r}")
    reader = _Reader(blob)
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}, expected {VERSION}")
    if len(blob) < 8:
        raise TruncatedError("checkpoint too short to hold a checksum")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"checksum mismatch: stored {stored_crc:#010x}, "
                            f"computed {actual_crc:#010x}")
    reader.blob = body
    vocab_in, vocab_out, embed, hidden, attention = reader.unpack("<5I")
    dims = ModelDims(vocab_in=vocab_in, vocab_out=vocab_out, embed_dim=embed,
                     hidden_dim=hidden, attention_dim=attention)
    (count,) = reader.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = tuple(reader.unpack("<I")[0] for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = reader.take(size * 8)
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape)
    if reader.offset != len(body):
        raise SerializationError(
            f"{len(body) - reader.offset} trailing bytes after the last tensor"
        )
    return ModelParams.from_arrays(dims, arrays)


def save_params(path: Path | str, params: ModelParams) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path: Path | str) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
