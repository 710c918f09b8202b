"""Exception types shared across the toolkit."""
from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class OrderViolation(ToolkitError):
    """A frame was appended out of iteration order (orchestrator bug)."""


class ContractViolation(ToolkitError):
    """A model invariant was broken by the caller."""


class DuplicateTrace(ToolkitError):
    """A trace directory for this qid already exists in the store."""


class StorageError(ToolkitError):
    """Filesystem failure while writing or reading a trace store."""


class CorruptTrace(ToolkitError):
    """A stored trace violates the artifact schemas or invariants."""

    def __init__(self, message: str, *, qid: str | None = None,
                 file: str | None = None, line: int | None = None):
        self.qid = qid
        self.file = file
        self.line = line
        super().__init__(message)

    def __str__(self) -> str:
        where = []
        if self.qid is not None:
            where.append(f"qid={self.qid}")
        if self.file is not None:
            where.append(f"file={self.file}")
        if self.line is not None:
            where.append(f"line={self.line}")
        base = super().__str__()
        return f"{base} ({', '.join(where)})" if where else base


class CodecError(ToolkitError):
    """Invalid escape sequence in a TSV field."""


class ParseError(ToolkitError):
    """Streamed generator text violated the control-tag grammar."""


class InputError(ToolkitError):
    """Invalid caller-supplied input (empty query, bad config, ...)."""


class NotIndexed(ToolkitError):
    """Document id is not present in the index."""


class DuplicateDocId(ToolkitError):
    """Corpus contains the same docid twice."""


class CorpusError(ToolkitError):
    """Corpus file is malformed or a docid cannot be resolved."""


class RerankError(ToolkitError):
    """The external re-ranking scorer failed."""


class ProtocolError(ToolkitError):
    """Malformed or unexpected generator-protocol message."""


class GeneratorError(ToolkitError):
    """Transport-level failure while talking to a generator."""
