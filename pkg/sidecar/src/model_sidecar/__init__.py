"""Reference generator sidecar for the JSON-lines protocol."""

from .backends import BackendConfig, EchoBackend, ScriptedFileBackend, load_backend
from .protocol import PROTOCOL_VERSION, Chunk, Done, Generate, Hello, decode, encode
from .server import handle_line, serve_stdio, serve_tcp

__all__ = [name for name in dir() if not name.startswith("_")]
