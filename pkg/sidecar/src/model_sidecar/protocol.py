"""JSON-lines generator protocol, version 1.

This is an independent implementation of the wire contract: one JSON object
per line, UTF-8, canonical encoding (sorted keys, compact separators, raw
unicode).  Types: hello, generate, chunk, done.  ``matched_stop`` is present
exactly when ``finish_reason`` is ``stop`` and is included at the end of the
concatenated chunk text.  Unknown fields are ignored.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

PROTOCOL_VERSION = 1
FINISH_REASONS = ("stop", "length", "eos", "error")

# Reply chunk size shared across conforming implementations so session
# transcripts are byte-reproducible.
CHUNK_SIZE = 8


class WireError(Exception):
    """Malformed or unexpected protocol message."""


@dataclass
class Hello:
    version: int = PROTOCOL_VERSION


@dataclass
class Generate:
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


def encode(message) -> str:
    if isinstance(message, Hello):
        payload = {"type": "hello", "version": message.version}
    elif isinstance(message, Generate):
        payload = {"type": "generate", "request_id": message.request_id,
                   "context": message.context,
                   "stop_sequences": list(message.stop_sequences),
                   "max_tokens": message.max_tokens}
    elif isinstance(message, Chunk):
        payload = {"type": "chunk", "request_id": message.request_id,
                   "text": message.text}
    elif isinstance(message, Done):
        if (message.matched_stop is not None) != (message.finish_reason == "stop"):
            raise WireError("matched_stop must be present iff finish_reason is stop")
        payload = {"type": "done", "request_id": message.request_id,
                   "finish_reason": message.finish_reason}
        if message.matched_stop is not None:
            payload["matched_stop"] = message.matched_stop
    else:
        raise WireError(f"cannot encode {type(message).__name__}")
    return json.dumps(payload, ensure_ascii=False, sort_keys=True,
                      separators=(",", ":"))


def decode(line: str):
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise WireError(f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise WireError("message must be a JSON object")
    kind = payload.get("type")
    if kind == "hello":
        return Hello(version=_field(payload, "version", int))
    if kind == "generate":
        stops = _field(payload, "stop_sequences", list)
        if not all(isinstance(s, str) for s in stops):
            raise WireError("stop_sequences must be strings")
        return Generate(request_id=_field(payload, "request_id", str),
                        context=_field(payload, "context", str),
                        stop_sequences=list(stops),
                        max_tokens=_field(payload, "max_tokens", int))
    if kind == "chunk":
        return Chunk(request_id=_field(payload, "request_id", str),
                     text=_field(payload, "text", str))
    if kind == "done":
        finish_reason = _field(payload, "finish_reason", str)
        if finish_reason not in FINISH_REASONS:
            raise WireError(f"unknown finish_reason {finish_reason!r}")
        matched_stop = payload.get("matched_stop")
        if matched_stop is not None and not isinstance(matched_stop, str):
            raise WireError("matched_stop must be a string")
        if (matched_stop is not None) != (finish_reason == "stop"):
            raise WireError("matched_stop must be present iff finish_reason is stop")
        return Done(request_id=_field(payload, "request_id", str),
                    finish_reason=finish_reason, matched_stop=matched_stop)
    raise WireError(f"unknown message type {kind!r}")


def _field(payload: dict, key: str, expected: type):
    if key not in payload:
        raise WireError(f"missing field {key!r}")
    value = payload[key]
    if expected is int and isinstance(value, bool):
        raise WireError(f"field {key!r} must be an integer")
    if not isinstance(value, expected):
        raise WireError(f"field {key!r} has wrong type")
    return value


def earliest_stop(text: str, stop_sequences: list[str]) -> tuple[int, str] | None:
    """(end offset, sequence) of the earliest stop hit; ties to the first listed."""
    best: tuple[int, str] | None = None
    for sequence in stop_sequences:
        if not sequence:
            continue
        index = text.find(sequence)
        if index != -1 and (best is None or index < best[0]):
            best = (index, sequence)
    if best is None:
        return None
    return best[0] + len(best[1]), best[1]


def split_chunks(text: str, size: int = CHUNK_SIZE) -> list[str]:
    if not text:
        return [""]
    return [text[i:i + size] for i in range(0, len(text), size)]
