"""Wire-protocol server: answers describe/encode/decode/predict_noise.

One request in flight per connection; each TCP connection is handled on its
own thread with its own file objects, so connections are isolated. Request
failures are reported as error replies and the connection stays alive;
framing errors (bad magic/version) end the connection after one error reply,
since the byte stream can no longer be resynchronized.
"""

from __future__ import annotations

import argparse
import socket
import sys
import threading
from typing import BinaryIO, Optional

import numpy as np

from .protocol import (
    OP_DECODE,
    OP_DESCRIBE,
    OP_ENCODE,
    OP_ERROR,
    OP_PREDICT_NOISE,
    ProtocolError,
    WireMessage,
    read_message,
    write_message,
)
from .runtime import RuntimeError_, StubRuntime


def _error(code: str, message: str) -> WireMessage:
    return WireMessage(OP_ERROR, (), {"code": code, "message": message})


def _handle_describe(runtime) -> WireMessage:
    return WireMessage(OP_DESCRIBE, (runtime.alpha_bar().astype(np.float32),),
                       runtime.describe_meta())


def _handle_predict(runtime, msg: WireMessage) -> WireMessage:
    z = np.asarray(msg.tensors[0], dtype=np.float64)
    t = int(msg.meta["t"])
    prompt = msg.meta.get("prompt")
    capture = list(msg.meta.get("capture") or [])
    mask_context = None
    if "mask_context" in msg.meta:
        mask_context = np.asarray(msg.tensors[msg.meta["mask_context"]], dtype=np.float64)
    mea = None
    if "mea" in msg.meta:
        layers = {}
        for entry in msg.meta["mea"]["layers"]:
            layers[entry["layer"]] = (
                np.asarray(msg.tensors[entry["m_p"]]) > 0.5,
                np.asarray(msg.tensors[entry["m_g"]]) > 0.5,
                np.asarray(msg.tensors[entry["k"]], dtype=np.float64),
                np.asarray(msg.tensors[entry["v"]], dtype=np.float64),
            )
        mea = {"beta": float(msg.meta["mea"]["beta"]), "layers": layers}

    eps, features, bundles = runtime.predict(z, t, prompt, mask_context, mea, capture)
    tensors = [eps]
    meta = {"features": {}, "bundles": {}}
    for name, feat in features.items():
        meta["features"][name] = len(tensors)
        tensors.append(feat)
    for name, (q, k, v, grid) in bundles.items():
        meta["bundles"][name] = {"q": len(tensors), "k": len(tensors) + 1,
                                 "v": len(tensors) + 2, "grid": list(grid)}
        tensors += [q, k, v]
    return WireMessage(OP_PREDICT_NOISE, tuple(tensors), meta)


def handle_connection(runtime, rfile: BinaryIO, wfile: BinaryIO) -> None:
    """Serve one connection until EOF."""
    while True:
        try:
            msg = read_message(rfile)
        except ProtocolError as exc:
            try:
                write_message(wfile, _error("protocol", str(exc)))
            except (OSError, ValueError):
                pass
            return
        if msg is None:
            return
        try:
            if msg.opcode == OP_DESCRIBE:
                reply = _handle_describe(runtime)
            elif msg.opcode == OP_ENCODE:
                reply = WireMessage(OP_ENCODE, (runtime.encode(msg.tensors[0]),), {})
            elif msg.opcode == OP_DECODE:
                reply = WireMessage(OP_DECODE, (runtime.decode(msg.tensors[0]),), {})
            elif msg.opcode == OP_PREDICT_NOISE:
                reply = _handle_predict(runtime, msg)
            else:
                reply = _error("opcode", f"unknown opcode {msg.opcode}")
        except RuntimeError_ as exc:
            reply = _error("argument", str(exc))
        except (KeyError, IndexError) as exc:
            reply = _error("argument", f"malformed request: {exc!r}")
        except Exception as exc:  # model failure: report, keep serving
            reply = _error("internal", str(exc))
        try:
            write_message(wfile, reply)
        except (OSError, ValueError):
            return


def serve(endpoint: str, runtime=None) -> None:
    """Serve forever on ``ipc:tcp://host:port`` or ``ipc:stdio``."""
    runtime = runtime or StubRuntime()
    if not endpoint.startswith("ipc:"):
        raise ValueError(f"not an ipc endpoint: {endpoint!r}")
    target = endpoint[len("ipc:"):]

    if target == "stdio":
        handle_connection(runtime, sys.stdin.buffer, sys.stdout.buffer)
        return

    if not target.startswith("tcp://"):
        raise ValueError(f"unsupported transport {target!r}")
    host, _, port = target[len("tcp://"):].partition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad tcp endpoint {target!r}, want tcp://host:port")

    with socket.create_server((host, int(port))) as srv:
        while True:
            conn, _addr = srv.accept()
            threading.Thread(target=_serve_socket, args=(runtime, conn),
                             daemon=True).start()


def _serve_socket(runtime, conn: socket.socket) -> None:
    with conn:
        handle_connection(runtime, conn.makefile("rb"), conn.makefile("wb"))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sd-adapter",
        description="Serve the denoiser backend wire protocol")
    parser.add_argument("--endpoint", default="ipc:stdio",
                        help="ipc:tcp://host:port or ipc:stdio (default)")
    parser.add_argument("--seed", type=int, default=0x5DAD,
                        help="stub runtime weight seed")
    args = parser.parse_args(argv)
    try:
        serve(args.endpoint, StubRuntime(seed=args.seed))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
