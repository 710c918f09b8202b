"""Serve a backend over stdio or TCP, one request in flight per connection."""
from __future__ import annotations

import socketserver
import sys

from .backends import BackendConfig, load_backend
from .protocol import (CHUNK_SIZE, PROTOCOL_VERSION, Chunk, Done, Generate, Hello,
                       WireError, decode, earliest_stop, encode, split_chunks)


def _reply_messages(backend, config: BackendConfig, request: Generate):
    """Backend text -> protocol messages, with stop enforcement and chunking."""
    text, finish_reason = backend.respond(request)
    matched_stop = None
    if config.stop_mode == "truncate":
        hit = earliest_stop(text, request.stop_sequences)
        if hit is not None:
            end, matched_stop = hit
            text = text[:end]  # overrun text after the stop is discarded
            finish_reason = "stop"
    messages = [Chunk(request_id=request.request_id, text=piece)
                for piece in split_chunks(text, CHUNK_SIZE)]
    messages.append(Done(request_id=request.request_id,
                         finish_reason=finish_reason, matched_stop=matched_stop))
    return messages


def handle_line(line: str, backend, config: BackendConfig) -> list[str]:
    """One input line -> encoded reply lines (possibly empty for blank input)."""
    if not line.strip():
        return []
    try:
        message = decode(line)
    except WireError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return [encode(Done(request_id="", finish_reason="error"))]
    if isinstance(message, Hello):
        if message.version != PROTOCOL_VERSION:
            return [encode(Done(request_id="", finish_reason="error"))]
        return [encode(Hello())]
    if isinstance(message, Generate):
        try:
            replies = _reply_messages(backend, config, message)
        except Exception as exc:  # backend failure must not kill the server
            print(f"backend error: {exc}", file=sys.stderr)
            return [encode(Done(request_id=message.request_id,
                                finish_reason="error"))]
        return [encode(m) for m in replies]
    print(f"unexpected {type(message).__name__} from client", file=sys.stderr)
    return [encode(Done(request_id="", finish_reason="error"))]


def serve_stdio(config: BackendConfig) -> int:
    backend = load_backend(config)
    for line in sys.stdin:
        for reply in handle_line(line.rstrip("\n"), backend, config):
            sys.stdout.write(reply + "\n")
        sys.stdout.flush()
    return 0


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        config = self.server.backend_config
        # Script playback is per run, so each connection gets a fresh script;
        # stateless or heavyweight backends are shared across connections.
        backend = (load_backend(config) if config.backend == "scripted_file"
                   else self.server.shared_backend)
        for raw in self.rfile:
            line = raw.decode("utf-8").rstrip("\n")
            for reply in handle_line(line, backend, config):
                self.wfile.write((reply + "\n").encode("utf-8"))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(config: BackendConfig, port: int, *, host: str = "127.0.0.1") -> int:
    # Fail fast on unloadable backends before accepting connections.
    shared = load_backend(config)
    with _Server((host, port), _Handler) as server:
        server.backend_config = config
        server.shared_backend = shared
        print(f"listening on {host}:{server.server_address[1]}", file=sys.stderr)
        server.serve_forever()
    return 0
