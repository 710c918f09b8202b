"""Incremental scanner for control tags in streamed generator text.

Agents coordinate their loop by emitting flat XML-style markers such as
``<think>...</think>`` and ``<search>...</search>``.  The parser consumes
arbitrary chunk boundaries, emits an event for every completed open/close
pair, and reports a stop signal when a search or answer closes.  The grammar
is deliberately minimal: no nesting, case-sensitive names, and any text is
allowed inside content except another recognized tag marker.  Text outside
recognized tags is skipped.  Information blocks are produced by the run
loop, never parsed; a generator that emits them spontaneously just produced
plain text.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from .errors import InputError, ParseError


class TagKind(Enum):
    THINK = "think"
    SEARCH = "search"
    ANSWER = "answer"
    REFINE = "refine"


STOP_SEARCH_ISSUED = "search_issued"
STOP_ANSWERED = "answered"

DEFAULT_TAG_NAMES: dict[TagKind, str] = {
    TagKind.THINK: "think",
    TagKind.SEARCH: "search",
    TagKind.ANSWER: "answer",
    TagKind.REFINE: "refine",
}

_NAME_RE = re.compile(r"[^\s<>/]+\Z")


@dataclass(frozen=True)
class TagEvent:
    """A completed tag pair.

    ``content`` is the text between the markers with surrounding whitespace
    trimmed; ``span`` is the (start, end) character offsets of the whole
    block, open marker through close marker, in the accumulated stream.
    """

    kind: TagKind
    content: str
    span: tuple[int, int]


class StreamTagParser:
    """Stateful scanner; one instance per run, fed in stream order.

    Chunking-invariant: feeding a stream in any partition yields the same
    event sequence, spans, and stop signals as feeding it whole.
    """

    def __init__(self, tag_names: Mapping[TagKind, str] | None = None):
        names = dict(DEFAULT_TAG_NAMES if tag_names is None else tag_names)
        if len(set(names.values())) != len(names):
            raise InputError("tag names must be distinct")
        for name in names.values():
            if not _NAME_RE.match(name):
                raise InputError(f"invalid tag name {name!r}")
        self._open_markers = {f"<{name}>": kind for kind, name in names.items()}
        self._close_markers = {f"</{name}>": kind for kind, name in names.items()}
        self._close_of = {kind: f"</{name}>" for kind, name in names.items()}
        self._text = ""
        self._pos = 0
        self._inside: TagKind | None = None
        self._block_start = 0
        self._content_start = 0
        self._error: ParseError | None = None

    @property
    def stream_size(self) -> int:
        return len(self._text)

    def stream_slice(self, start: int, end: int) -> str:
        return self._text[start:end]

    def feed(self, chunk: str) -> tuple[list[TagEvent], str | None]:
        """Consume a chunk; return completed events and an optional stop.

        The stop signal reflects the first search/answer event completed by
        this call (``search_issued`` or ``answered``).  Partial markers at
        the end of the available text simply wait for more input.

        A grammar violation raises ParseError.  If the violating call also
        completed events, those are returned first and the error is raised
        on the next interaction, so the emitted event sequence does not
        depend on chunk boundaries.
        """
        self._raise_if_poisoned()
        self._text += chunk
        events: list[TagEvent] = []
        try:
            while True:
                if self._inside is None:
                    if not self._enter_next_tag():
                        break
                else:
                    event = self._close_current_tag()
                    if event is None:
                        break
                    events.append(event)
        except ParseError as exc:
            self._error = exc
            if not events:
                raise
        stop = None
        for event in events:
            if event.kind is TagKind.SEARCH:
                stop = STOP_SEARCH_ISSUED
                break
            if event.kind is TagKind.ANSWER:
                stop = STOP_ANSWERED
                break
        return events, stop

    def finish(self) -> None:
        """Signal end of stream; raises ParseError if a tag is unclosed."""
        self._raise_if_poisoned()
        if self._inside is not None:
            name = self._close_of[self._inside][2:-1]
            self._error = ParseError(f"stream ended inside an unclosed <{name}> tag")
            raise self._error

    def _raise_if_poisoned(self) -> None:
        if self._error is not None:
            raise self._error

    def _enter_next_tag(self) -> bool:
        hit = self._find_earliest(self._open_markers)
        if hit is None:
            return False
        index, marker, kind = hit
        self._inside = kind
        self._block_start = index
        self._content_start = index + len(marker)
        self._pos = self._content_start
        return True

    def _close_current_tag(self) -> TagEvent | None:
        own_close = self._close_of[self._inside]
        candidates = dict(self._close_markers)
        candidates.update(self._open_markers)
        hit = self._find_earliest(candidates)
        if hit is None:
            return None
        index, marker, kind = hit
        if marker in self._open_markers:
            raise ParseError(f"{marker} opened before {own_close} closed")
        if marker != own_close:
            raise ParseError(f"tag <{own_close[2:-1]}> closed by {marker}")
        content = self._text[self._content_start:index].strip()
        event = TagEvent(kind=self._inside, content=content,
                         span=(self._block_start, index + len(marker)))
        self._pos = index + len(marker)
        self._inside = None
        return event

    def _find_earliest(self, markers: Mapping[str, TagKind]):
        best: tuple[int, str, TagKind] | None = None
        for marker, kind in markers.items():
            index = self._text.find(marker, self._pos)
            if index != -1 and (best is None or index < best[0]):
                best = (index, marker, kind)
        return best


def extract_single(text: str, tag_name: str) -> str | None:
    """Content of the first well-formed occurrence of a tag pair, or None."""
    pattern = re.compile(f"<{re.escape(tag_name)}>(.*?)</{re.escape(tag_name)}>",
                         re.DOTALL)
    match = pattern.search(text)
    if match is None:
        return None
    return match.group(1).strip()
