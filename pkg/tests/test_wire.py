import io
import socket
import struct
import threading

import numpy as np
import pytest

from tryon.attention import AttentionBundle, downsample_mask
from tryon.backend import MeaRequest, ToyBackend
from tryon.errors import ArgumentError, CapabilityError
from tryon.pipeline import run_try_on
from tryon.wire import (
    MAGIC,
    OP_DESCRIBE,
    OP_ENCODE,
    OP_ERROR,
    OP_PREDICT_NOISE,
    IpcBackend,
    WireError,
    WireMessage,
    encode_message,
    read_message,
    serve_connection,
    write_message,
)


def round_trip(msg: WireMessage) -> WireMessage:
    return read_message(io.BytesIO(encode_message(msg)))


class TestCodec:
    def test_random_tensors_byte_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rank = rng.integers(0, 5)
            shape = tuple(int(s) for s in rng.integers(1, 6, size=rank))
            t = rng.standard_normal(shape).astype(np.float32)
            back = round_trip(WireMessage(OP_ENCODE, (t,), {}))
            assert back.tensors[0].tobytes() == t.tobytes()
            assert back.tensors[0].shape == t.shape

    def test_meta_and_opcode_survive(self):
        meta = {"t": 7, "prompt": "blue shirt", "capture": ["dec2"]}
        back = round_trip(WireMessage(OP_PREDICT_NOISE, (), meta))
        assert back.opcode == OP_PREDICT_NOISE
        assert back.meta == meta

    def test_multiple_tensors_keep_order(self):
        ts = [np.full((i + 1,), i, np.float32) for i in range(5)]
        back = round_trip(WireMessage(OP_ENCODE, tuple(ts), {}))
        for a, b in zip(ts, back.tensors):
            assert np.array_equal(a, b)

    def test_bad_magic_rejected(self):
        buf = bytearray(encode_message(WireMessage(OP_DESCRIBE, (), {})))
        buf[:4] = b"XXXX"
        with pytest.raises(WireError):
            read_message(io.BytesIO(bytes(buf)))

    def test_bad_version_rejected(self):
        buf = bytearray(encode_message(WireMessage(OP_DESCRIBE, (), {})))
        struct.pack_into("<H", buf, 4, 99)
        with pytest.raises(WireError):
            read_message(io.BytesIO(bytes(buf)))

    def test_truncated_payload_rejected(self):
        buf = encode_message(WireMessage(OP_ENCODE, (np.ones(4, np.float32),), {}))
        with pytest.raises(WireError):
            read_message(io.BytesIO(buf[:-3]))

    def test_eof_returns_none(self):
        assert read_message(io.BytesIO(b"")) is None

    def test_unknown_dtype_rejected(self):
        buf = bytearray(encode_message(WireMessage(OP_ENCODE, (np.ones(2, np.float32),), {})))
        # dtype byte sits after header(16) + n_tensors(4) + rank(1) + one dim(4)
        buf[16 + 4 + 1 + 4] = 9
        with pytest.raises(WireError):
            read_message(io.BytesIO(bytes(buf)))


@pytest.fixture
def ipc_pair():
    """IpcBackend client talking to a threaded ToyBackend server."""
    toy = ToyBackend(image_size=32, num_steps=10)
    client_sock, server_sock = socket.socketpair()
    server_r = server_sock.makefile("rb")
    server_w = server_sock.makefile("wb")
    thread = threading.Thread(target=serve_connection, args=(toy, server_r, server_w),
                              daemon=True)
    thread.start()
    client = IpcBackend(rfile=client_sock.makefile("rb"), wfile=client_sock.makefile("wb"))
    yield toy, client
    client.close()
    client_sock.close()
    thread.join(timeout=5)
    server_sock.close()


class TestIpcBackend:
    def test_describe_matches_toy(self, ipc_pair):
        toy, client = ipc_pair
        d_toy, d_ipc = toy.describe(), client.describe()
        assert d_ipc.latent_scale == d_toy.latent_scale
        assert d_ipc.latent_channels == d_toy.latent_channels
        assert d_ipc.hook_layers == d_toy.hook_layers
        assert d_ipc.capture_layers == d_toy.capture_layers
        assert d_ipc.num_steps == d_toy.num_steps
        assert not d_ipc.supports_attn_hook  # hooks never cross the wire

    def test_schedule_transported(self, ipc_pair):
        toy, client = ipc_pair
        np.testing.assert_allclose(client.schedule().alpha_bar,
                                   toy.schedule().alpha_bar, atol=1e-7)
        assert client.schedule().alpha_bar[0] == 1.0

    def test_encode_decode_match(self, ipc_pair):
        toy, client = ipc_pair
        img = np.random.default_rng(1).uniform(0, 1, (32, 32, 3))
        z_ipc = client.encode(img)
        z_toy = toy.encode(img)
        assert np.abs(z_ipc - z_toy).max() < 1e-6
        assert np.abs(client.decode(z_ipc) - toy.decode(z_toy)).max() < 1e-6

    def test_predict_noise_matches_toy(self, ipc_pair):
        toy, client = ipc_pair
        rng = np.random.default_rng(2)
        z = rng.standard_normal((8, 8, 4))
        cond_t = toy.embed_prompt("x")
        cond_c = client.embed_prompt("x")
        eps_ipc = client.predict_noise(z, 3, cond_c).eps
        eps_toy = toy.predict_noise(z, 3, cond_t).eps
        assert np.abs(eps_ipc - eps_toy).max() < 1e-5

    def test_predict_with_capture_and_mask(self, ipc_pair):
        toy, client = ipc_pair
        rng = np.random.default_rng(3)
        z = rng.standard_normal((8, 8, 4))
        mask = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
        out = client.predict_noise(z, 2, None, mask_context=mask,
                                   capture=["dec2", "attn0"])
        ref = toy.predict_noise(z, 2, None, mask_context=mask,
                                capture=["dec2", "attn0"])
        assert np.abs(out.features["dec2"] - ref.features["dec2"]).max() < 1e-5
        b, rb = out.bundles["attn0"], ref.bundles["attn0"]
        assert b.grid == rb.grid
        assert np.abs(b.k - rb.k).max() < 1e-5

    def test_mea_request_matches_toy(self, ipc_pair):
        toy, client = ipc_pair
        rng = np.random.default_rng(4)
        z = rng.standard_normal((8, 8, 4))
        z_ref = rng.standard_normal((8, 8, 4))
        ref = toy.predict_noise(z_ref, 3, None, capture=["attn0"]).bundles["attn0"]
        m_p = downsample_mask(rng.uniform(size=(32, 32)) > 0.4, (8, 8), rule="majority")
        m_g = np.ones(64, bool)
        req = MeaRequest(1.5, {"attn0": (m_p, m_g, ref)})
        eps_ipc = client.predict_noise(z, 3, None, mea=req).eps
        eps_toy = toy.predict_noise(z, 3, None, mea=req).eps
        assert np.abs(eps_ipc - eps_toy).max() < 1e-5

    def test_attn_hook_refused_client_side(self, ipc_pair):
        _, client = ipc_pair
        with pytest.raises(CapabilityError):
            client.predict_noise(np.zeros((8, 8, 4)), 1, None,
                                 attn_hook=lambda layer, b: None)

    def test_foreign_conditioning_rejected(self, ipc_pair):
        toy, client = ipc_pair
        with pytest.raises(ArgumentError):
            client.predict_noise(np.zeros((8, 8, 4)), 1, toy.embed_prompt("x"))

    def test_server_error_reply_keeps_connection(self, ipc_pair):
        _, client = ipc_pair
        with pytest.raises(ArgumentError):
            client.encode(np.zeros((5, 5, 3)))  # not divisible by scale
        # connection still serves afterwards
        img = np.zeros((32, 32, 3))
        assert client.encode(img).shape == (8, 8, 4)

    def test_unknown_opcode_error_reply(self, ipc_pair):
        _, client = ipc_pair
        write_message(client._wfile, WireMessage(42, (), {}))
        reply = read_message(client._rfile)
        assert reply.opcode == OP_ERROR
        assert reply.meta["code"] == "opcode"
        assert client.encode(np.zeros((32, 32, 3))).shape == (8, 8, 4)

    def test_endpoint_parsing(self):
        with pytest.raises(ArgumentError):
            IpcBackend("tcp://localhost:1")   # missing ipc: scheme
        with pytest.raises(ArgumentError):
            IpcBackend("ipc:stdio")
        with pytest.raises(ArgumentError):
            IpcBackend("ipc:tcp://nohost")    # missing port


class TestPipelineOverIpc:
    def test_full_run_deterministic_and_pasted(self, ipc_pair):
        from tryon.pipeline import TryOnJob
        _, client = ipc_pair
        rng = np.random.default_rng(3)
        person = rng.uniform(0, 1, (32, 32, 3))
        mask = np.zeros((32, 32), bool)
        mask[8:28, 6:26] = True
        job = lambda: TryOnJob(person=person, garment=person.copy(),
                               person_mask=mask, garment_mask=mask.copy(), seed=3)
        out1 = run_try_on(job(), client)
        out2 = run_try_on(job(), client)
        assert np.array_equal(out1, out2)
        assert np.array_equal(out1[~mask], person[~mask])
