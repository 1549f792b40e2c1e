"""Minimal AAWF writer/reader shared by the weight converter and the test oracle."""

import json
import struct
import zlib

import numpy as np

MAGIC = b"AAWF0001"
ALIGN = 64


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write(path, header, tensors):
    """tensors: list of (name, ndarray). Arrays are stored as little-endian f32."""
    header = dict(header)
    header["format_version"] = 1
    blobs = [(name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in tensors]
    offsets = [0] * len(blobs)
    for _ in range(8):
        records = [
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "byte_offset": offsets[i],
                "crc32": zlib.crc32(arr.tobytes()),
            }
            for i, (name, arr) in enumerate(blobs)
        ]
        text = json.dumps({**header, "tensors": records}, separators=(",", ":")).encode()
        cursor = _align(16 + len(text))
        nxt = []
        for _, arr in blobs:
            nxt.append(cursor)
            cursor = _align(cursor + arr.nbytes)
        if nxt == offsets:
            break
        offsets = nxt
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        pos = 16 + len(text)
        for off, (_, arr) in zip(offsets, blobs):
            f.write(b"\0" * (off - pos))
            f.write(arr.tobytes())
            pos = off + arr.nbytes


def read(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    tensors = {}
    for rec in header.pop("tensors"):
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        raw = data[rec["byte_offset"] : rec["byte_offset"] + 4 * count]
        if zlib.crc32(raw) != rec["crc32"]:
            raise ValueError(f"{path}: checksum failure for tensor {rec['name']}")
        tensors[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(rec["shape"])
    return header, tensors
