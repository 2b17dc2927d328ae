"""Binary tensor wire protocol, server side.

Frame: magic b"MX4Z", version u16, opcode u16, payload length u64, all
little-endian. Payload: n_tensors u32; per tensor rank u8, dims u32 x rank,
dtype u8 (0 = f32), row-major little-endian data; then a u32-length-prefixed
UTF-8 JSON metadata blob. v1 is f32-only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

MAGIC = b"MX4Z"
VERSION = 1

OP_DESCRIBE = 1
OP_ENCODE = 2
OP_DECODE = 3
OP_PREDICT_NOISE = 4
OP_ERROR = 255

DTYPE_F32 = 0

_HEADER = struct.Struct("<4sHHQ")


class ProtocolError(Exception):
    """Malformed or unsupported frame."""


@dataclass(frozen=True)
class WireMessage:
    opcode: int
    tensors: tuple
    meta: dict


def _pack_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f4")
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + struct.pack("<B", DTYPE_F32) + a.tobytes()


def encode_message(msg: WireMessage) -> bytes:
    meta = json.dumps(msg.meta, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<I", len(msg.tensors))
    for t in msg.tensors:
        body += _pack_tensor(t)
    body += struct.pack("<I", len(meta)) + meta
    return _HEADER.pack(MAGIC, VERSION, msg.opcode, len(body)) + body


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("payload truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def parse_payload(opcode: int, payload: bytes) -> WireMessage:
    cur = _Cursor(payload)
    (n_tensors,) = cur.unpack("<I")
    tensors = []
    for _ in range(n_tensors):
        (rank,) = cur.unpack("<B")
        dims = cur.unpack(f"<{rank}I") if rank else ()
        (dtype,) = cur.unpack("<B")
        if dtype != DTYPE_F32:
            raise ProtocolError(f"unsupported dtype code {dtype}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        tensors.append(np.frombuffer(cur.take(4 * n), dtype="<f4").reshape(dims).copy())
    (meta_len,) = cur.unpack("<I")
    meta = json.loads(cur.take(meta_len).decode("utf-8")) if meta_len else {}
    if cur.pos != len(payload):
        raise ProtocolError(f"{len(payload) - cur.pos} trailing payload bytes")
    return WireMessage(opcode, tuple(tensors), meta)


def read_message(rfile: BinaryIO) -> Optional[WireMessage]:
    """Read one frame; None on clean EOF at a frame boundary."""
    head = rfile.read(_HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        raise ProtocolError("truncated frame header")
    magic, version, opcode, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    payload = rfile.read(length)
    if len(payload) < length:
        raise ProtocolError("truncated payload")
    return parse_payload(opcode, payload)


def write_message(wfile: BinaryIO, msg: WireMessage) -> None:
    wfile.write(encode_message(msg))
    wfile.flush()
