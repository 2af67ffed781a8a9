"""Versioned binary container for named float64 arrays.

One format serves every artifact that is not CSV: model weights (layer dims
first, then parameters in declaration order) and generated datasets (features
and labels).  Layout, all little-endian:

    magic   8 bytes  b"TBARR1\\x00\\x00"
    version u32
    count   u32                       number of arrays
    per array:
        name_len u16, name bytes (utf-8)
        ndim     u32, shape u32 * ndim
        data     f64 * prod(shape), C order

Arrays round-trip bit for bit; writing the same mapping twice produces
byte-identical files.
"""

import struct

import numpy as np

MAGIC = b"TBARR1\x00\x00"
FILE_VERSION = 1
_HEAD = struct.Struct("<8sII")
_NAME = struct.Struct("<H")
_DIM = struct.Struct("<I")


def dump_arrays(arrays) -> bytes:
    chunks = [_HEAD.pack(MAGIC, FILE_VERSION, len(arrays))]
    for name, arr in arrays.items():
        # asarray keeps 0-d arrays 0-d; tobytes() already emits C order
        data = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"array name too long: {name[:32]}...")
        chunks.append(_NAME.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_DIM.pack(data.ndim))
        for d in data.shape:
            chunks.append(_DIM.pack(d))
        chunks.append(data.tobytes(order="C"))
    return b"".join(chunks)


def save_arrays(path, arrays) -> None:
    """Write a name -> array mapping (order preserved on load)."""
    with open(path, "wb") as fh:
        fh.write(dump_arrays(arrays))


def load_arrays(path):
    """Read a mapping written by save_arrays; validates magic and version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_arrays(blob)


def parse_arrays(blob: bytes):
    if len(blob) < _HEAD.size:
        raise ValueError("array file truncated")
    magic, version, count = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError("not a twinbelt array file")
    if version != FILE_VERSION:
        raise ValueError(f"unsupported array file version {version}")
    offset = _HEAD.size
    arrays = {}
    for _ in range(count):
        try:
            (name_len,) = _NAME.unpack_from(blob, offset)
            offset += _NAME.size
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = _DIM.unpack_from(blob, offset)
            offset += _DIM.size
            shape = []
            for _ in range(ndim):
                (d,) = _DIM.unpack_from(blob, offset)
                offset += _DIM.size
                shape.append(d)
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            end = offset + 8 * n
            if end > len(blob):
                raise struct.error("short data")
            arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
            offset = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError("array file truncated or corrupt") from exc
        arrays[name] = arr.copy()
    if offset != len(blob):
        raise ValueError("trailing bytes after last array")
    return arrays
