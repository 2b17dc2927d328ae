"""Out-of-process denoiser backend: a wire-protocol server wrapping either a
deterministic stub runtime or (optionally) a real latent-diffusion pipeline."""

from .protocol import MAGIC, VERSION, WireMessage, encode_message, read_message
from .runtime import StubRuntime
from .server import handle_connection, serve

__all__ = [
    "MAGIC", "VERSION", "WireMessage", "encode_message", "read_message",
    "StubRuntime", "handle_connection", "serve",
]
__version__ = "0.1.0"
