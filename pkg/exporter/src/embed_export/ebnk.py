"""EBNK bank writer.

Byte layout (little-endian, extension ``.ebnk``):

    magic "EBNK" | version u32 (=1) | modality u8 (0 visual, 1 textual)
    | dim u32 | class count u32 | record count u32
    | class table: per class, name length u16 + UTF-8 bytes
    | records: per record, class index u32 + dim float32 values
    | CRC32 u32 over all preceding bytes

This is a standalone serializer for the format the adaptation engine
consumes; keeping it independent means the round-trip tests prove the
format contract instead of sharing code with the reader.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import SpecError

MAGIC = b"EBNK"
VERSION = 1
MODALITY_CODES = {"visual": 0, "textual": 1}


def write_bank(path, modality: str, classes: list[str], class_index,
               vectors) -> int:
    """Write one bank file and return the CRC32 of its payload."""
    if modality not in MODALITY_CODES:
        raise SpecError(f"unknown modality {modality!r}")
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    class_index = np.asarray(class_index, dtype=np.int64)
    if vectors.ndim != 2:
        raise SpecError(f"vectors must be 2-D, got shape {vectors.shape}")
    if class_index.shape != (vectors.shape[0],):
        raise SpecError("class_index length does not match record count")
    if len(set(classes)) != len(classes):
        raise SpecError("duplicate class names")
    if not np.isfinite(vectors).all():
        raise SpecError("non-finite feature value")
    n, dim = vectors.shape
    parts = [MAGIC, struct.pack("<IBIII", VERSION, MODALITY_CODES[modality],
                                dim, len(classes), n)]
    for name in classes:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise SpecError(f"class name too long: {name[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    for i in range(n):
        parts.append(struct.pack("<I", int(class_index[i])))
        parts.append(vectors[i].tobytes())
    body = b"".join(parts)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))
    return crc
