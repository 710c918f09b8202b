"""Wire protocol between the run loop and any text generator.

Messages are JSON objects, one per line, UTF-8, with a ``type`` field:

    {"type": "hello", "version": 1}
    {"type": "generate", "request_id": ..., "context": ...,
     "stop_sequences": [...], "max_tokens": ...}
    {"type": "chunk", "request_id": ..., "text": ...}
    {"type": "done", "request_id": ..., "finish_reason": "stop"|"length"|
     "eos"|"error", "matched_stop": ...}

``matched_stop`` is present exactly when ``finish_reason`` is ``stop``, and
the matched stop sequence is included at the end of the concatenated chunk
text.  Unknown JSON fields are ignored for forward compatibility.  Encoding
is canonical (sorted keys, compact separators, raw UTF-8) so identical
messages are byte-identical on the wire.

The same schema runs over the stdio of a child process or a TCP socket; a
deterministic scripted mock generator is provided for tests and dry runs.
"""
from __future__ import annotations

import json
import shlex
import socket
import subprocess
import threading
import queue
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

from .errors import GeneratorError, InputError, ProtocolError

PROTOCOL_VERSION = 1
FINISH_REASONS = ("stop", "length", "eos", "error")

# Chunk size used by the scripted mock (and mirrored by conforming sidecars)
# so session transcripts are byte-reproducible.
DEFAULT_CHUNK_SIZE = 8


@dataclass
class Hello:
    version: int = PROTOCOL_VERSION


@dataclass
class GenerateRequest:
    request_id: str
    context: str
    stop_sequences: list[str]
    max_tokens: int


@dataclass
class Chunk:
    request_id: str
    text: str


@dataclass
class Done:
    request_id: str
    finish_reason: str
    matched_stop: str | None = None


Message = Union[Hello, GenerateRequest, Chunk, Done]


@dataclass
class GenerateReply:
    """A full reply: the streamed chunks plus the final done message."""

    request_id: str
    chunks: list[str]
    finish_reason: str
    matched_stop: str | None = None

    @property
    def text(self) -> str:
        return "".join(self.chunks)


def encode_message(message: Message) -> str:
    """Canonical one-line JSON encoding (no trailing newline)."""
    if isinstance(message, Hello):
        payload = {"type": "hello", "version": message.version}
    elif isinstance(message, GenerateRequest):
        payload = {"type": "generate", "request_id": message.request_id,
                   "context": message.context,
                   "stop_sequences": list(message.stop_sequences),
                   "max_tokens": message.max_tokens}
    elif isinstance(message, Chunk):
        payload = {"type": "chunk", "request_id": message.request_id,
                   "text": message.text}
    elif isinstance(message, Done):
        if (message.matched_stop is not None) != (message.finish_reason == "stop"):
            raise ProtocolError("matched_stop must be present iff finish_reason is stop")
        payload = {"type": "done", "request_id": message.request_id,
                   "finish_reason": message.finish_reason}
        if message.matched_stop is not None:
            payload["matched_stop"] = message.matched_stop
    else:
        raise ProtocolError(f"cannot encode {type(message).__name__}")
    return json.dumps(payload, ensure_ascii=False, sort_keys=True,
                      separators=(",", ":"))


def decode_message(line: str) -> Message:
    """Parse one protocol line; unknown fields are ignored."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolError("message must be a JSON object")
    kind = payload.get("type")
    if kind == "hello":
        version = _get(payload, "version", int)
        return Hello(version=version)
    if kind == "generate":
        stops = _get(payload, "stop_sequences", list)
        if not all(isinstance(s, str) for s in stops):
            raise ProtocolError("stop_sequences must be a list of strings")
        return GenerateRequest(
            request_id=_get(payload, "request_id", str),
            context=_get(payload, "context", str),
            stop_sequences=list(stops),
            max_tokens=_get(payload, "max_tokens", int),
        )
    if kind == "chunk":
        return Chunk(request_id=_get(payload, "request_id", str),
                     text=_get(payload, "text", str))
    if kind == "done":
        finish_reason = _get(payload, "finish_reason", str)
        if finish_reason not in FINISH_REASONS:
            raise ProtocolError(f"unknown finish_reason {finish_reason!r}")
        matched_stop = payload.get("matched_stop")
        if matched_stop is not None and not isinstance(matched_stop, str):
            raise ProtocolError("matched_stop must be a string")
        if (matched_stop is not None) != (finish_reason == "stop"):
            raise ProtocolError("matched_stop must be present iff finish_reason is stop")
        return Done(request_id=_get(payload, "request_id", str),
                    finish_reason=finish_reason, matched_stop=matched_stop)
    raise ProtocolError(f"unknown message type {kind!r}")


def _get(payload: dict, key: str, expected: type):
    if key not in payload:
        raise ProtocolError(f"missing field {key!r}")
    value = payload[key]
    if expected is int and isinstance(value, bool):
        raise ProtocolError(f"field {key!r} must be an integer")
    if not isinstance(value, expected):
        raise ProtocolError(f"field {key!r} has wrong type")
    return value


def find_earliest_stop(text: str, stop_sequences: list[str]) -> tuple[int, str] | None:
    """(end offset, sequence) of the earliest stop occurrence, or None.

    Ties at the same start offset resolve to the sequence listed first.
    """
    best: tuple[int, str] | None = None
    for seq in stop_sequences:
        if not seq:
            continue
        index = text.find(seq)
        if index != -1 and (best is None or index < best[0]):
            best = (index, seq)
    if best is None:
        return None
    index, seq = best
    return index + len(seq), seq


def split_chunks(text: str, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[str]:
    """Split reply text into at least one chunk of at most chunk_size chars."""
    if not text:
        return [""]
    return [text[i:i + chunk_size] for i in range(0, len(text), chunk_size)]


# -- scripted mock generator ----------------------------------------------

TRIGGER_ALWAYS = "always_next"
TRIGGER_CONTEXT = "context_contains"


@dataclass(frozen=True)
class MockScriptEntry:
    """One canned response; fires at most once.

    ``always_next`` entries match any request; ``context_contains`` entries
    match only when the request context contains ``trigger_text``.  The
    entry's ``finish_reason`` applies when no stop sequence fires inside the
    response.
    """

    response: str
    trigger: str = TRIGGER_ALWAYS
    trigger_text: str | None = None
    finish_reason: str = "eos"

    def __post_init__(self):
        if self.trigger not in (TRIGGER_ALWAYS, TRIGGER_CONTEXT):
            raise InputError(f"unknown trigger {self.trigger!r}")
        if self.trigger == TRIGGER_CONTEXT and self.trigger_text is None:
            raise InputError("context_contains trigger needs trigger_text")
        if self.finish_reason not in ("eos", "length", "error"):
            raise InputError(f"invalid scripted finish_reason {self.finish_reason!r}")

    def matches(self, context: str) -> bool:
        if self.trigger == TRIGGER_ALWAYS:
            return True
        return self.trigger_text in context


@dataclass
class MockScript:
    entries: list[MockScriptEntry] = field(default_factory=list)

    @classmethod
    def from_dict(cls, payload: dict) -> "MockScript":
        if not isinstance(payload, dict) or not isinstance(payload.get("entries"), list):
            raise InputError("script must be an object with an entries list")
        entries = []
        for raw in payload["entries"]:
            if not isinstance(raw, dict) or "response" not in raw:
                raise InputError("each script entry needs a response field")
            entries.append(MockScriptEntry(
                response=raw["response"],
                trigger=raw.get("trigger", TRIGGER_ALWAYS),
                trigger_text=raw.get("trigger_text"),
                finish_reason=raw.get("finish_reason", "eos"),
            ))
        return cls(entries)

    def to_dict(self) -> dict:
        entries = []
        for e in self.entries:
            raw: dict = {"response": e.response, "trigger": e.trigger,
                         "finish_reason": e.finish_reason}
            if e.trigger_text is not None:
                raw["trigger_text"] = e.trigger_text
            entries.append(raw)
        return {"entries": entries}

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot load script {path}: {exc}") from exc
        return cls.from_dict(payload)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8")


class MockGenerator:
    """Deterministic in-process generator driven by a script.

    On each request the first unconsumed entry whose trigger matches the
    context fires; unmatched entries stay available for later calls.  An
    exhausted (or fully unmatched) script yields an empty eos reply.  Stop
    sequences are honored exactly as a conforming generator would: the
    response is truncated just past the earliest occurrence.
    """

    def __init__(self, script: MockScript, *, chunk_size: int = DEFAULT_CHUNK_SIZE):
        self._entries = list(script.entries)
        self._consumed = [False] * len(self._entries)
        self._chunk_size = chunk_size

    def generate(self, request: GenerateRequest) -> GenerateReply:
        entry = None
        for i, candidate in enumerate(self._entries):
            if self._consumed[i]:
                continue
            if candidate.matches(request.context):
                self._consumed[i] = True
                entry = candidate
                break
        if entry is None:
            return GenerateReply(request.request_id, [""], "eos", None)
        text = entry.response
        finish_reason = entry.finish_reason
        matched_stop = None
        hit = find_earliest_stop(text, request.stop_sequences)
        if hit is not None:
            end, matched_stop = hit
            text = text[:end]
            finish_reason = "stop"
        return GenerateReply(request.request_id, split_chunks(text, self._chunk_size),
                             finish_reason, matched_stop)

    def close(self) -> None:
        pass


def mock_generate(generator: MockGenerator, request: GenerateRequest) -> GenerateReply:
    return generator.generate(request)


# -- remote generator clients ----------------------------------------------

class _LineReader:
    """Background reader so stdio/socket reads can time out."""

    def __init__(self, stream):
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(stream,), daemon=True)
        self._thread.start()

    def _pump(self, stream):
        try:
            for line in stream:
                self._queue.put(line)
        except (OSError, ValueError):
            pass
        self._queue.put(None)

    def readline(self, timeout: float | None) -> str:
        try:
            line = self._queue.get(timeout=timeout)
        except queue.Empty:
            raise GeneratorError("timed out waiting for generator output") from None
        if line is None:
            raise GeneratorError("generator closed the connection")
        return line


class _ProtocolClient:
    """Shared request/reply logic over a line-based transport."""

    def __init__(self, writer, reader: _LineReader, *, timeout: float | None = 300.0):
        self._writer = writer
        self._reader = reader
        self._timeout = timeout
        self._handshake()

    def _handshake(self) -> None:
        self._send(Hello())
        reply = self._recv()
        if not isinstance(reply, Hello):
            raise ProtocolError(f"expected hello, got {type(reply).__name__}")
        if reply.version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {reply.version}")

    def _send(self, message: Message) -> None:
        try:
            self._writer.write(encode_message(message) + "\n")
            self._writer.flush()
        except (OSError, ValueError, BrokenPipeError) as exc:
            raise GeneratorError(f"failed to send to generator: {exc}") from exc

    def _recv(self) -> Message:
        line = self._reader.readline(self._timeout)
        return decode_message(line.rstrip("\n"))

    def generate(self, request: GenerateRequest) -> GenerateReply:
        self._send(request)
        chunks: list[str] = []
        while True:
            message = self._recv()
            if isinstance(message, Chunk):
                if message.request_id != request.request_id:
                    raise ProtocolError("chunk for a different request_id")
                chunks.append(message.text)
            elif isinstance(message, Done):
                if message.request_id != request.request_id:
                    raise ProtocolError("done for a different request_id")
                return GenerateReply(request.request_id, chunks or [""],
                                     message.finish_reason, message.matched_stop)
            else:
                raise ProtocolError(f"unexpected {type(message).__name__} mid-reply")


class SubprocessGenerator(_ProtocolClient):
    """Generator hosted by a child process, JSON lines over stdin/stdout."""

    def __init__(self, argv: list[str], *, timeout: float | None = 300.0, env=None):
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", env=env)
        except OSError as exc:
            raise GeneratorError(f"cannot launch generator {argv!r}: {exc}") from exc
        super().__init__(self._proc.stdin, _LineReader(self._proc.stdout),
                         timeout=timeout)

    def close(self) -> None:
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=10)
        except (OSError, subprocess.TimeoutExpired):
            self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


class TcpGenerator(_ProtocolClient):
    """Generator reached over a TCP socket."""

    def __init__(self, host: str, port: int, *, timeout: float | None = 300.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise GeneratorError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._file = self._sock.makefile("rw", encoding="utf-8", newline="\n")
        super().__init__(self._file, _LineReader(self._file), timeout=timeout)

    def close(self) -> None:
        # Unblock the reader thread first; closing the shared file object
        # while a read is in flight would wait out the socket timeout.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        for resource in (self._file, self._sock):
            try:
                resource.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def make_generator_factory(spec: str, *, timeout: float | None = 300.0
                           ) -> Callable[[str], object]:
    """Build a per-run generator factory from a CLI endpoint spec.

    Supported forms: ``cmd:PROGRAM ARGS...`` (child process per run),
    ``tcp:HOST:PORT`` (new connection per run), and ``script:PATH`` (an
    in-process scripted mock, consumed fresh for every run).
    """
    if spec.startswith("cmd:"):
        argv = shlex.split(spec[len("cmd:"):])
        if not argv:
            raise InputError("cmd: generator spec needs a command line")
        return lambda qid: SubprocessGenerator(argv, timeout=timeout)
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise InputError("tcp: generator spec must be tcp:HOST:PORT")
        try:
            port_no = int(port)
        except ValueError:
            raise InputError(f"invalid port {port!r}") from None
        return lambda qid: TcpGenerator(host, port_no, timeout=timeout)
    if spec.startswith("script:"):
        script = MockScript.load(spec[len("script:"):])
        return lambda qid: MockGenerator(script)
    raise InputError(f"unknown generator spec {spec!r} (use cmd:, tcp:, or script:)")
