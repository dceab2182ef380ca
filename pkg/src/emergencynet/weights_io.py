"""Checkpoint serialization with integrity checking.

Layout, all integers little-endian u32 unless noted:

    magic   4 bytes, ``ACFF``
    version u32
    config  u32 byte length, then that many UTF-8 bytes holding
            newline-separated ``key=value`` lines (architecture, fusion
            mode, class count, input size, channel schedule)
    records repeated until 4 bytes remain:
            u32 name length + UTF-8 name
            u32 dtype code (0 = little-endian float32)
            u32 rank, then rank u32 dims
            prod(dims) * 4 payload bytes
    crc32   u32 over every preceding byte

Writes go to a sibling temp file and are renamed into place only after
the checksum lands, so a torn write never leaves a readable checkpoint.
Payloads are stored as float32 regardless of the in-memory dtype.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .model import ModelGraph, model_from_config

FORMAT_MAGIC = b"ACFF"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class WeightsFormatError(ValueError):
    """A weights file is damaged, truncated, or from an unknown writer."""


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _encode_config(config: dict[str, str]) -> bytes:
    lines = []
    for key in sorted(config):
        value = str(config[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"config entry {key!r} is not serializable")
        lines.append(f"{key}={value}")
    blob = "\n".join(lines).encode("utf-8")
    return _u32(len(blob)) + blob


def _decode_config(blob: bytes) -> dict[str, str]:
    config = {}
    if not blob:
        return config
    for line in blob.decode("utf-8").split("\n"):
        key, sep, value = line.partition("=")
        if not sep:
            raise WeightsFormatError(f"malformed config line {line!r}")
        config[key] = value
    return config


def _encode_record(name: str, array: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    raw = name.encode("utf-8")
    head = _u32(len(raw)) + raw + _u32(DTYPE_F32) + _u32(array.ndim)
    dims = b"".join(_u32(d) for d in array.shape)
    return head + dims + payload


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise WeightsFormatError("weights file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def remaining(self) -> int:
        return self.end - self.pos


def save_weights(graph: ModelGraph, path: Union[str, Path]) -> None:
    """Serialize every state array; the write is atomic."""
    path = Path(path)
    parts = [FORMAT_MAGIC, _u32(FORMAT_VERSION), _encode_config(graph.config)]
    for name, array in graph.state_dict().items():
        parts.append(_encode_record(name, array))
    body = b"".join(parts)
    blob = body + _u32(zlib.crc32(body) & 0xFFFFFFFF)

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_weights(path: Union[str, Path], dtype=np.float32) -> ModelGraph:
    """Rebuild the stored architecture and install its weights.

    The checksum is verified before any parsing, so a corrupted file
    raises without constructing a partially loaded model.
    """
    data = Path(path).read_bytes()
    if len(data) < len(FORMAT_MAGIC) + 8:
        raise WeightsFormatError("weights file is truncated")
    if data[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightsFormatError("checksum mismatch, file is corrupted")

    reader = _Reader(data, end=len(data) - 4)
    reader.take(len(FORMAT_MAGIC))
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    config = _decode_config(reader.take(reader.u32()))

    state: dict[str, np.ndarray] = {}
    while reader.remaining:
        name = reader.take(reader.u32()).decode("utf-8")
        code = reader.u32()
        if code != DTYPE_F32:
            raise WeightsFormatError(f"unsupported dtype code {code} for {name!r}")
        rank = reader.u32()
        dims = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = reader.take(count * 4)
        if name in state:
            raise WeightsFormatError(f"duplicate record {name!r}")
        array = np.frombuffer(payload, dtype="<f4").reshape(dims)
        state[name] = array.astype(dtype, copy=True)

    graph = model_from_config(config, dtype=dtype)
    graph.config = dict(config)  # keep extra keys (class names etc.) verbatim
    graph.load_state(state)
    return graph
