"""Frames and traces: the data model of one agentic run.

A frame records everything one iteration produced: the synthetic query sent
to the retriever, the ranked list of retrieved docids, and the reflective
descriptions (chain-of-thought text, refinement output) tied to that
iteration.  A trace is the ordered list of frames of a single run plus the
final answer, when one was produced.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import ContractViolation, OrderViolation

THOUGHT = "thought"
REFINEMENT = "refinement"
DESCRIPTION_KINDS = (THOUGHT, REFINEMENT)


class TraceStatus(str, Enum):
    """Terminal state of a run; IN_PROGRESS is a provisional marker only."""

    IN_PROGRESS = "in_progress"
    ANSWERED = "answered"
    PARSE_ERROR = "parse_error"
    GENERATOR_ERROR = "generator_error"
    ITERATION_CAP = "iteration_cap"
    # Assigned when reading an external shard that carries no meta sidecar
    # and no answer row; never produced by the run loop itself.
    UNKNOWN = "unknown"


FINAL_STATUSES = frozenset({
    TraceStatus.ANSWERED,
    TraceStatus.PARSE_ERROR,
    TraceStatus.GENERATOR_ERROR,
    TraceStatus.ITERATION_CAP,
})


@dataclass
class Frame:
    """One iteration's record: query, ranked list, reflective descriptions.

    ``ranked_list`` holds (docid, rank) pairs with ranks consecutive from 1;
    it may be empty (an empty retrieval is legitimate).  ``descriptions``
    holds (kind, text) pairs in chronological order, kind being ``thought``
    or ``refinement``.
    """

    iteration: int
    query: str
    ranked_list: list[tuple[int, int]] = field(default_factory=list)
    descriptions: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.iteration < 0:
            raise ContractViolation(f"iteration must be >= 0, got {self.iteration}")
        if not self.query:
            raise ContractViolation("frame query must be non-empty")
        for pos, (_docid, rank) in enumerate(self.ranked_list, start=1):
            if rank != pos:
                raise ContractViolation(
                    f"ranks must be consecutive from 1, got rank {rank} at position {pos}")
        for kind, _text in self.descriptions:
            if kind not in DESCRIPTION_KINDS:
                raise ContractViolation(f"unknown description kind {kind!r}")


@dataclass
class Trace:
    """Ordered frames of one run plus its optional answer.

    While a run is executing the status is IN_PROGRESS and frames may be
    appended; :meth:`finalize` freezes the trace.  An answer is present if
    and only if the status is ANSWERED; runs that ended early (parse error,
    generator failure, iteration cap) are retained as incomplete traces.
    """

    qid: str
    initial_query: str
    frames: list[Frame] = field(default_factory=list)
    answer: str | None = None
    status: TraceStatus = TraceStatus.IN_PROGRESS

    def __post_init__(self):
        for i, frame in enumerate(self.frames):
            if frame.iteration != i:
                raise ContractViolation(
                    f"frame iterations must be consecutive from 0, got {frame.iteration} at {i}")
        if self.status is not TraceStatus.IN_PROGRESS:
            _check_answer_status(self.answer, self.status)

    @property
    def length(self) -> int:
        """Trace length: the number of frames (searches) in the run."""
        return len(self.frames)

    @property
    def finalized(self) -> bool:
        return self.status is not TraceStatus.IN_PROGRESS

    def append_frame(self, frame: Frame) -> None:
        """Append the next frame; its iteration must equal the frame count."""
        if self.finalized:
            raise ContractViolation("cannot append to a finalized trace")
        if frame.iteration != len(self.frames):
            raise OrderViolation(
                f"expected iteration {len(self.frames)}, got {frame.iteration}")
        self.frames.append(frame)

    def finalize(self, answer: str | None, status: TraceStatus) -> None:
        """Freeze the trace with its terminal status.

        The answer is stored verbatim; incomplete runs pass answer=None with
        a non-ANSWERED status.
        """
        if self.finalized:
            raise ContractViolation("trace already finalized")
        if status not in FINAL_STATUSES:
            raise ContractViolation(f"{status.value} is not a terminal status")
        _check_answer_status(answer, status)
        self.answer = answer
        self.status = status


def _check_answer_status(answer: str | None, status: TraceStatus) -> None:
    if (answer is not None) and status is not TraceStatus.ANSWERED:
        raise ContractViolation(f"answer present with status {status.value}")
    if answer is None and status is TraceStatus.ANSWERED:
        raise ContractViolation("status answered requires an answer")
