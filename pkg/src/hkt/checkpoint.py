"""Binary checkpoint format for :class:`~hkt.blocks.BlockNet`.

Layout (all integers little-endian)::

    b"HKTC"                     magic
    u32 version                 FORMAT_VERSION
    u32 len, bytes              header, UTF-8 ``key=value`` lines
    u32 count                   number of arrays
    repeated count times:
        u32 len, bytes          parameter name (UTF-8)
        u32 ndim, ndim x u32    shape
        prod(shape) x f64       values, row-major

The header carries ``name``, ``spec``, ``input_shape``, ``frozen`` and any
training metadata (``step``, ``seed``, ...). Nothing may follow the last array.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .blocks import BlockNet, freeze
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    HKTError,
)

MAGIC = b"HKTC"
FORMAT_VERSION = 1


def encode_checkpoint(net: BlockNet, meta: dict | None = None) -> bytes:
    header = {
        "name": net.name,
        "spec": net.spec,
        "input_shape": ",".join(str(d) for d in net.input_shape),
        "frozen": "1" if net.frozen else "0",
    }
    for k, v in sorted({**net.meta, **(meta or {})}.items()):
        if k in header:
            continue
        header[k] = str(v)
    text = "".join(f"{k}={v}\n" for k, v in header.items()).encode()
    params = list(net.named_parameters())
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(text)), text, struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(net: BlockNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(net, meta))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(buf: bytes) -> BlockNet:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        text = r.take(r.u32()).decode()
        header = dict(line.split("=", 1) for line in text.splitlines() if line)
        input_shape = tuple(int(d) for d in header["input_shape"].split(","))
        name, spec = header["name"], header["spec"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint header: {exc}") from None
    try:
        net = BlockNet.build(name, spec, input_shape)
    except HKTError as exc:
        raise CheckpointShapeError(f"header describes an invalid network: {exc}") from None
    expected = dict(net.named_parameters())
    count = r.u32()
    if count != len(expected):
        raise CheckpointShapeError(f"checkpoint holds {count} arrays, architecture needs {len(expected)}")
    for _ in range(count):
        pname = r.take(r.u32()).decode(errors="replace")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        values = np.frombuffer(r.take(8 * math.prod(shape)), dtype="<f8").reshape(shape)
        target = expected.pop(pname, None)
        if target is None:
            raise CheckpointShapeError(f"unexpected array {pname!r}")
        if tuple(shape) != target.shape:
            raise CheckpointShapeError(f"array {pname!r} has shape {shape}, architecture needs {target.shape}")
        target.data[...] = values
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after last array")
    meta = {k: v for k, v in header.items() if k not in ("name", "spec", "input_shape", "frozen")}
    net.meta = meta
    if header.get("frozen") == "1":
        freeze(net)
    return net


def load_checkpoint(path) -> BlockNet:
    return decode_checkpoint(Path(path).read_bytes())
