"""Binary tensor IPC: message codec, client backend, and a reference server.

Frame layout (all integers little-endian):

    magic   4 bytes  b"MX4Z"
    version u16      currently 1
    opcode  u16      1=describe 2=encode 3=decode 4=predict_noise 255=error
    length  u64      payload byte count
    payload:
        n_tensors u32
        per tensor: rank u8, dims u32 x rank, dtype u8 (0 = f32),
                    row-major little-endian data
        meta_len  u32
        meta      UTF-8 JSON (prompt, timestep, capture flags, index map)

v1 carries f32 only. Conditioning does not cross the wire as a vector: the
client sends the prompt string in the metadata blob and the server embeds it,
so ``embed_prompt`` on the client returns an opaque handle. In-process
attention hook callables cannot be serialized; the client advertises
``supports_attn_hook=False`` and callers substitute attention through the
structured MeaRequest path instead.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .attention import AttentionBundle
from .backend import AttnHook, BackendDescriptor, MeaRequest, PredictOutput
from .diffusion import NoiseSchedule
from .errors import ArgumentError, CapabilityError, TryOnError

MAGIC = b"MX4Z"
VERSION = 1

OP_DESCRIBE = 1
OP_ENCODE = 2
OP_DECODE = 3
OP_PREDICT_NOISE = 4
OP_ERROR = 255

DTYPE_F32 = 0

_HEADER = struct.Struct("<4sHHQ")


class WireError(TryOnError):
    """Malformed frame or a protocol-level failure."""


@dataclass(frozen=True)
class WireMessage:
    opcode: int
    tensors: tuple
    meta: dict


def _pack_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f4")  # not ascontiguousarray: that promotes 0-d to 1-d
    if a.ndim > 255:
        raise WireError(f"tensor rank {a.ndim} exceeds protocol limit")
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
            raise WireError("payload truncated")
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
            raise WireError(f"unsupported dtype code {dtype}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = cur.take(4 * n)
        tensors.append(np.frombuffer(data, dtype="<f4").reshape(dims).copy())
    (meta_len,) = cur.unpack("<I")
    meta = json.loads(cur.take(meta_len).decode("utf-8")) if meta_len else {}
    if cur.pos != len(payload):
        raise WireError(f"{len(payload) - cur.pos} trailing payload bytes")
    return WireMessage(opcode, tuple(tensors), meta)


def read_message(rfile: BinaryIO) -> Optional[WireMessage]:
    """Read one frame; None on clean EOF at a frame boundary."""
    head = rfile.read(_HEADER.size)
    if not head:
        return None
    if len(head) < _HEADER.size:
        raise WireError("truncated frame header")
    magic, version, opcode, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported protocol version {version}")
    payload = rfile.read(length)
    if len(payload) < length:
        raise WireError("truncated payload")
    return parse_payload(opcode, payload)


def write_message(wfile: BinaryIO, msg: WireMessage) -> None:
    wfile.write(encode_message(msg))
    wfile.flush()


# ---------------------------------------------------------------------------
# client

def _mask_to_tensor(m: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=bool).astype(np.float32)


class IpcBackend:
    """Denoiser backend speaking the wire protocol to a remote server.

    Accepts ``ipc:tcp://host:port`` endpoints, or an already-open file pair
    (used by tests and by stdio-spawned transports).
    """

    def __init__(self, endpoint: Optional[str] = None, *,
                 rfile: Optional[BinaryIO] = None, wfile: Optional[BinaryIO] = None):
        if endpoint is not None:
            if rfile is not None or wfile is not None:
                raise ArgumentError("pass an endpoint or a file pair, not both")
            rfile, wfile = self._connect(endpoint)
        if rfile is None or wfile is None:
            raise ArgumentError("IpcBackend needs an endpoint or rfile+wfile")
        self._rfile = rfile
        self._wfile = wfile
        self._descriptor: Optional[BackendDescriptor] = None
        self._schedule: Optional[NoiseSchedule] = None

    @staticmethod
    def _connect(endpoint: str):
        if not endpoint.startswith("ipc:"):
            raise ArgumentError(f"not an ipc endpoint: {endpoint!r}")
        target = endpoint[len("ipc:"):]
        if target == "stdio":
            raise ArgumentError(
                "ipc:stdio names the server side of a spawned transport; "
                "connect the client with ipc:tcp://host:port")
        if not target.startswith("tcp://"):
            raise ArgumentError(f"unsupported ipc transport {target!r}")
        host, _, port = target[len("tcp://"):].partition(":")
        if not host or not port.isdigit():
            raise ArgumentError(f"bad tcp endpoint {target!r}, want tcp://host:port")
        sock = socket.create_connection((host, int(port)))
        return sock.makefile("rb"), sock.makefile("wb")

    def close(self) -> None:
        self._wfile.close()
        self._rfile.close()

    def _request(self, opcode: int, tensors=(), meta=None) -> WireMessage:
        write_message(self._wfile, WireMessage(opcode, tuple(tensors), meta or {}))
        reply = read_message(self._rfile)
        if reply is None:
            raise WireError("connection closed mid-request")
        if reply.opcode == OP_ERROR:
            code = reply.meta.get("code", "error")
            message = reply.meta.get("message", "remote failure")
            if code == "capability":
                raise CapabilityError(message)
            if code == "argument":
                raise ArgumentError(message)
            raise WireError(f"remote {code}: {message}")
        if reply.opcode != opcode:
            raise WireError(f"reply opcode {reply.opcode} != request {opcode}")
        return reply

    def _ensure_described(self) -> None:
        if self._descriptor is not None:
            return
        reply = self._request(OP_DESCRIBE)
        m = reply.meta
        self._descriptor = BackendDescriptor(
            latent_scale=int(m["latent_scale"]),
            latent_channels=int(m["latent_channels"]),
            capture_layers={k: int(v) for k, v in m["capture_layers"].items()},
            hook_layers={k: tuple(v) for k, v in m["hook_layers"].items()},
            num_steps=int(m["num_steps"]),
            default_capture_layer=m["default_capture_layer"],
            image_size=int(m["image_size"]),
            inpaint_conditioning=bool(m["inpaint_conditioning"]),
            supports_attn_hook=False,  # callables never cross the wire
        )
        alphas = np.asarray(reply.tensors[0], dtype=np.float64)
        alphas[0] = 1.0  # exact by schedule invariant; f32 transport is lossless here
        self._schedule = NoiseSchedule(alphas)

    def describe(self) -> BackendDescriptor:
        self._ensure_described()
        return self._descriptor

    def schedule(self) -> NoiseSchedule:
        self._ensure_described()
        return self._schedule

    def encode(self, image: np.ndarray) -> np.ndarray:
        reply = self._request(OP_ENCODE, [np.asarray(image)])
        return np.asarray(reply.tensors[0], dtype=np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        reply = self._request(OP_DECODE, [np.asarray(latent)])
        return np.asarray(reply.tensors[0], dtype=np.float64)

    def embed_prompt(self, prompt: Optional[str]):
        # opaque handle: the server embeds the prompt per predict request
        return _PromptHandle(prompt)

    def predict_noise(self, z, t, cond, *, mask_context=None,
                      attn_hook: Optional[AttnHook] = None,
                      mea: Optional[MeaRequest] = None,
                      capture=None) -> PredictOutput:
        if attn_hook is not None:
            raise CapabilityError("attention hook callables cannot cross the IPC wire; "
                                  "use the structured MEA request")
        if cond is not None and not isinstance(cond, _PromptHandle):
            raise ArgumentError("IPC conditioning must come from this backend's embed_prompt")
        tensors = [np.asarray(z)]
        meta = {
            "t": int(t),
            "prompt": None if cond is None else cond.prompt,
            "capture": list(capture or []),
        }
        if mask_context is not None:
            meta["mask_context"] = len(tensors)
            tensors.append(np.asarray(mask_context, dtype=np.float64))
        if mea is not None:
            layers = []
            for layer, (m_p, m_g, ref) in mea.layers.items():
                entry = {"layer": layer, "ref_grid": list(ref.grid),
                         "m_p": len(tensors), "m_g": len(tensors) + 1,
                         "k": len(tensors) + 2, "v": len(tensors) + 3}
                tensors += [_mask_to_tensor(m_p), _mask_to_tensor(m_g), ref.k, ref.v]
                layers.append(entry)
            meta["mea"] = {"beta": float(mea.beta), "layers": layers}

        reply = self._request(OP_PREDICT_NOISE, tensors, meta)
        eps = np.asarray(reply.tensors[0], dtype=np.float64)
        features = {name: np.asarray(reply.tensors[idx], dtype=np.float64)
                    for name, idx in reply.meta.get("features", {}).items()}
        bundles = {}
        for name, entry in reply.meta.get("bundles", {}).items():
            q, k, v = (np.asarray(reply.tensors[entry[key]], dtype=np.float64)
                       for key in ("q", "k", "v"))
            bundles[name] = AttentionBundle(q, k, v, tuple(entry["grid"]))
        return PredictOutput(eps, features, bundles)


@dataclass(frozen=True)
class _PromptHandle:
    prompt: Optional[str]


# ---------------------------------------------------------------------------
# reference server: wraps any in-process backend behind the wire protocol

def _descriptor_reply(backend) -> WireMessage:
    d = backend.describe()
    meta = {
        "latent_scale": d.latent_scale,
        "latent_channels": d.latent_channels,
        "capture_layers": dict(d.capture_layers),
        "hook_layers": {k: list(v) for k, v in d.hook_layers.items()},
        "num_steps": d.num_steps,
        "default_capture_layer": d.default_capture_layer,
        "image_size": d.image_size,
        "inpaint_conditioning": d.inpaint_conditioning,
    }
    alphas = backend.schedule().alpha_bar.astype(np.float32)
    return WireMessage(OP_DESCRIBE, (alphas,), meta)


def _predict_reply(backend, msg: WireMessage) -> WireMessage:
    z = np.asarray(msg.tensors[0], dtype=np.float64)
    t = int(msg.meta["t"])
    cond = backend.embed_prompt(msg.meta.get("prompt"))
    mask_context = None
    if "mask_context" in msg.meta:
        mask_context = np.asarray(msg.tensors[msg.meta["mask_context"]], dtype=np.float64)
    mea = None
    if "mea" in msg.meta:
        layers = {}
        for entry in msg.meta["mea"]["layers"]:
            m_p = np.asarray(msg.tensors[entry["m_p"]]) > 0.5
            m_g = np.asarray(msg.tensors[entry["m_g"]]) > 0.5
            k = np.asarray(msg.tensors[entry["k"]], dtype=np.float64)
            v = np.asarray(msg.tensors[entry["v"]], dtype=np.float64)
            # a reference bundle only contributes keys/values; reuse K as a
            # shape-compatible query block
            ref = AttentionBundle(k, k, v, tuple(entry["ref_grid"]))
            layers[entry["layer"]] = (m_p, m_g, ref)
        mea = MeaRequest(float(msg.meta["mea"]["beta"]), layers)

    out = backend.predict_noise(z, t, cond, mask_context=mask_context,
                                mea=mea, capture=msg.meta.get("capture") or None)
    tensors = [out.eps]
    meta = {"features": {}, "bundles": {}}
    for name, feat in out.features.items():
        meta["features"][name] = len(tensors)
        tensors.append(feat)
    for name, b in out.bundles.items():
        meta["bundles"][name] = {"q": len(tensors), "k": len(tensors) + 1,
                                 "v": len(tensors) + 2, "grid": list(b.grid)}
        tensors += [b.q, b.k, b.v]
    return WireMessage(OP_PREDICT_NOISE, tuple(tensors), meta)


def serve_connection(backend, rfile: BinaryIO, wfile: BinaryIO) -> None:
    """Answer requests on one connection until EOF.

    Per-request failures become error replies; the connection stays alive.
    """
    while True:
        try:
            msg = read_message(rfile)
        except WireError as exc:
            write_message(wfile, WireMessage(OP_ERROR, (), {"code": "protocol",
                                                            "message": str(exc)}))
            return  # framing lost; cannot resynchronize
        if msg is None:
            return
        try:
            if msg.opcode == OP_DESCRIBE:
                reply = _descriptor_reply(backend)
            elif msg.opcode == OP_ENCODE:
                reply = WireMessage(OP_ENCODE, (backend.encode(msg.tensors[0]),), {})
            elif msg.opcode == OP_DECODE:
                reply = WireMessage(OP_DECODE, (backend.decode(msg.tensors[0]),), {})
            elif msg.opcode == OP_PREDICT_NOISE:
                reply = _predict_reply(backend, msg)
            else:
                reply = WireMessage(OP_ERROR, (), {"code": "opcode",
                                                   "message": f"unknown opcode {msg.opcode}"})
        except ArgumentError as exc:
            reply = WireMessage(OP_ERROR, (), {"code": "argument", "message": str(exc)})
        except CapabilityError as exc:
            reply = WireMessage(OP_ERROR, (), {"code": "capability", "message": str(exc)})
        except Exception as exc:  # model failure: report, keep serving
            reply = WireMessage(OP_ERROR, (), {"code": "internal", "message": str(exc)})
        write_message(wfile, reply)
