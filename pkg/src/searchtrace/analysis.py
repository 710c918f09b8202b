"""Workload statistics, reformulation dynamics, and text metrics over traces.

Runs are modeled as Markov processes over reformulation states.  Each
synthetic query is classified against the queries that preceded it in the
same trace (the initial organic query plus prior synthetic queries):

    IN   initial state, the organic query enters the system
    ADD  the previous query expanded with extra tokens
    REM  a narrowed query, a proper subsequence of the previous one
    REP  an exact resubmission of the previous query
    DUP  an exact duplicate of an earlier, non-adjacent query
    CH   any other reformulation
    OUT  terminal state, the run ended

Comparisons use normalized text (lowercased, whitespace collapsed);
subsequence relations are token-level and order-preserving.  Precedence is
REP > DUP > ADD > REM > CH: the most specific relation wins, and a repeat
of an older query is a duplicate even when other relations also hold.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .trace import Trace


class ReformulationState(str, Enum):
    IN = "IN"
    ADD = "ADD"
    REM = "REM"
    REP = "REP"
    DUP = "DUP"
    CH = "CH"
    OUT = "OUT"


STATES: tuple[ReformulationState, ...] = tuple(ReformulationState)
STATE_INDEX = {state: i for i, state in enumerate(STATES)}
N_STATES = len(STATES)

WH_WORDS = frozenset({"what", "why", "how", "when", "where", "who", "which", "whose"})


def normalize(text: str) -> str:
    """Lowercase and collapse all whitespace runs to single spaces."""
    return " ".join(text.lower().split())


def _is_proper_subsequence(short: Sequence[str], long: Sequence[str]) -> bool:
    if len(short) >= len(long):
        return False
    it = iter(long)
    return all(token in it for token in short)


def classify_state(query: str, history: Sequence[str]) -> ReformulationState:
    """Map one synthetic query to its reformulation state.

    ``history`` is the ordered list of preceding queries: the organic query
    first, then any prior synthetic queries.
    """
    if not history:
        raise InputError("history must contain at least the initial query")
    norm_query = normalize(query)
    norm_last = normalize(history[-1])
    if norm_query == norm_last:
        return ReformulationState.REP
    for previous in history[:-1]:
        if normalize(previous) == norm_query:
            return ReformulationState.DUP
    query_tokens = norm_query.split(" ") if norm_query else []
    last_tokens = norm_last.split(" ") if norm_last else []
    if _is_proper_subsequence(last_tokens, query_tokens):
        return ReformulationState.ADD
    if _is_proper_subsequence(query_tokens, last_tokens):
        return ReformulationState.REM
    return ReformulationState.CH


def trace_transitions(trace: Trace) -> list[tuple[ReformulationState, ReformulationState]]:
    """Consecutive state pairs of one trace, from IN through OUT.

    A zero-frame trace contributes the single pair (IN, OUT); incomplete
    traces terminate like any other.
    """
    if not trace.initial_query.strip():
        raise InputError(f"trace {trace.qid} has no initial query; "
                         "supply the organic queries to analyze reformulations")
    states = [ReformulationState.IN]
    history = [trace.initial_query]
    for frame in trace.frames:
        states.append(classify_state(frame.query, history))
        history.append(frame.query)
    states.append(ReformulationState.OUT)
    return list(zip(states[:-1], states[1:]))


@dataclass
class TransitionMatrix:
    """Empirical transition counts between reformulation states.

    Rows are from-states, columns to-states, ordered as STATES.  The OUT row
    and the IN column are structurally zero for agent traces.
    """

    counts: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        """Row-normalized counts; rows without outgoing transitions stay zero."""
        counts = self.counts.astype(float)
        sums = counts.sum(axis=1, keepdims=True)
        return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def build_transition_matrix(traces: Iterable[Trace]) -> TransitionMatrix:
    """Aggregate all consecutive-query transitions of a trace collection."""
    counts = np.zeros((N_STATES, N_STATES), dtype=np.int64)
    for trace in traces:
        for source, target in trace_transitions(trace):
            counts[STATE_INDEX[source], STATE_INDEX[target]] += 1
    return TransitionMatrix(counts)


def per_iteration_distributions(traces: Iterable[Trace], max_iteration: int) -> np.ndarray:
    """State distribution of the i-th synthetic query, for i in 1..max_iteration.

    Row i-1 holds the empirical distribution over the state assigned to the
    i-th query, computed over traces with at least i frames; rows no trace
    reaches are all zero.  Iterations beyond ``max_iteration`` are omitted.
    """
    if max_iteration < 1:
        raise InputError("max_iteration must be >= 1")
    counts = np.zeros((max_iteration, N_STATES), dtype=np.int64)
    for trace in traces:
        transitions = trace_transitions(trace)
        # Targets of the first N transitions are the states of queries 1..N.
        for i, (_source, target) in enumerate(transitions[:-1][:max_iteration]):
            counts[i, STATE_INDEX[target]] += 1
    totals = counts.sum(axis=1, keepdims=True).astype(float)
    return np.divide(counts.astype(float), totals,
                     out=np.zeros((max_iteration, N_STATES)), where=totals > 0)


# -- workload statistics ----------------------------------------------------

@dataclass
class TraceStats:
    """Aggregate workload statistics of a trace collection."""

    n_traces: int
    answers: int
    search_calls: int
    trace_length_mean: float
    trace_length_std: float
    trace_length_max: int
    query_length_mean: float
    query_length_std: float


def trace_stats(traces: Iterable[Trace]) -> TraceStats:
    """Counts, trace-length moments, and synthetic query lengths.

    Standard deviations are population standard deviations; query length is
    measured in whitespace tokens.  An empty collection yields all zeros.
    """
    traces = list(traces)
    lengths = [trace.length for trace in traces]
    answers = sum(1 for trace in traces if trace.answer is not None)
    query_lengths = [len(frame.query.split())
                     for trace in traces for frame in trace.frames]
    return TraceStats(
        n_traces=len(traces),
        answers=answers,
        search_calls=sum(lengths),
        trace_length_mean=statistics.fmean(lengths) if lengths else 0.0,
        trace_length_std=statistics.pstdev(lengths) if lengths else 0.0,
        trace_length_max=max(lengths) if lengths else 0,
        query_length_mean=statistics.fmean(query_lengths) if query_lengths else 0.0,
        query_length_std=statistics.pstdev(query_lengths) if query_lengths else 0.0,
    )


# -- text-stream metrics -----------------------------------------------------

@dataclass
class TextStats:
    hapax_ratio: float
    wh_query_rate: float
    wh_token_rate: float
    exact_repeat_rate: float
    mean_within_trace_jaccard: float


def hapax_ratio(queries: Iterable[str]) -> float:
    """Fraction of vocabulary types occurring exactly once in the pooled stream."""
    counts: dict[str, int] = {}
    for query in queries:
        for token in query.lower().split():
            counts[token] = counts.get(token, 0) + 1
    if not counts:
        return 0.0
    singletons = sum(1 for c in counts.values() if c == 1)
    return singletons / len(counts)


def wh_word_rate(queries: Iterable[str]) -> float:
    """Fraction of queries containing at least one WH-word token."""
    total = 0
    hits = 0
    for query in queries:
        total += 1
        if any(token in WH_WORDS for token in query.lower().split()):
            hits += 1
    return hits / total if total else 0.0


def wh_token_rate(queries: Iterable[str]) -> float:
    """Fraction of all tokens that are WH-words (per-token variant)."""
    total = 0
    hits = 0
    for query in queries:
        for token in query.lower().split():
            total += 1
            if token in WH_WORDS:
                hits += 1
    return hits / total if total else 0.0


def exact_repeat_rate(traces: Iterable[Trace]) -> float:
    """Fraction of synthetic queries equal to any earlier query in their trace.

    The comparison history includes the initial organic query (when known)
    and uses normalized text; the denominator is the total number of
    synthetic queries.
    """
    total = 0
    repeats = 0
    for trace in traces:
        seen: set[str] = set()
        if trace.initial_query.strip():
            seen.add(normalize(trace.initial_query))
        for frame in trace.frames:
            total += 1
            norm = normalize(frame.query)
            if norm in seen:
                repeats += 1
            seen.add(norm)
    return repeats / total if total else 0.0


def within_trace_jaccard(traces: Iterable[Trace]) -> float:
    """Mean token-set Jaccard similarity between same-trace synthetic queries.

    For every trace with at least two synthetic queries, the mean over all
    unordered query pairs; returns the mean over qualifying traces, or 0
    when none qualify.
    """
    per_trace: list[float] = []
    for trace in traces:
        token_sets = [set(frame.query.lower().split()) for frame in trace.frames]
        if len(token_sets) < 2:
            continue
        sims = []
        for i in range(len(token_sets)):
            for j in range(i + 1, len(token_sets)):
                union = token_sets[i] | token_sets[j]
                if not union:
                    sims.append(1.0)
                else:
                    sims.append(len(token_sets[i] & token_sets[j]) / len(union))
        per_trace.append(statistics.fmean(sims))
    return statistics.fmean(per_trace) if per_trace else 0.0


def text_stats(traces: Iterable[Trace]) -> TextStats:
    traces = list(traces)
    queries = [frame.query for trace in traces for frame in trace.frames]
    return TextStats(
        hapax_ratio=hapax_ratio(queries),
        wh_query_rate=wh_word_rate(queries),
        wh_token_rate=wh_token_rate(queries),
        exact_repeat_rate=exact_repeat_rate(traces),
        mean_within_trace_jaccard=within_trace_jaccard(traces),
    )


# -- report writers ----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(float(value))


def render_matrix_tsv(matrix: np.ndarray, *, source: str | None = None) -> str:
    """7x7 matrix as TSV with state-name header row and column."""
    names = [state.value for state in STATES]
    lines = []
    if source is None:
        lines.append("state\t" + "\t".join(names))
        for i, name in enumerate(names):
            lines.append(name + "\t" + "\t".join(_fmt(v) for v in matrix[i]))
    else:
        for i, name in enumerate(names):
            lines.append(source + "\t" + name + "\t"
                         + "\t".join(_fmt(v) for v in matrix[i]))
    return "\n".join(lines) + "\n"


def write_matrix_report(matrix: TransitionMatrix, path, *, counts: bool = False,
                        human: np.ndarray | None = None) -> None:
    """Write the transition matrix; optionally side by side with a human one."""
    values = matrix.counts if counts else matrix.probabilities
    names = [state.value for state in STATES]
    if human is None:
        text = render_matrix_tsv(values)
    else:
        header = "source\tstate\t" + "\t".join(names) + "\n"
        text = (header + render_matrix_tsv(values, source="agent")
                + render_matrix_tsv(human, source="human"))
    _write_text(path, text)


def read_matrix_tsv(path) -> np.ndarray:
    """Read a matrix written by :func:`write_matrix_report` (single-source form)."""
    from pathlib import Path

    lines = Path(path).read_text(encoding="utf-8").rstrip("\n").split("\n")
    names = [state.value for state in STATES]
    expected_header = "state\t" + "\t".join(names)
    if not lines or lines[0] != expected_header:
        raise InputError(f"bad matrix header in {path}")
    if len(lines) != 1 + N_STATES:
        raise InputError(f"expected {N_STATES} matrix rows in {path}")
    matrix = np.zeros((N_STATES, N_STATES))
    for i, line in enumerate(lines[1:]):
        cols = line.split("\t")
        if len(cols) != 1 + N_STATES or cols[0] != names[i]:
            raise InputError(f"bad matrix row {i} in {path}")
        matrix[i] = [float(c) for c in cols[1:]]
    return matrix


def write_stats_report(stats: TraceStats, path) -> None:
    rows = [
        ("traces", stats.n_traces),
        ("answers", stats.answers),
        ("search_calls", stats.search_calls),
        ("trace_length_mean", stats.trace_length_mean),
        ("trace_length_std", stats.trace_length_std),
        ("trace_length_max", stats.trace_length_max),
        ("query_length_mean", stats.query_length_mean),
        ("query_length_std", stats.query_length_std),
    ]
    _write_kv(path, rows)


def write_text_report(stats: TextStats, path) -> None:
    rows = [
        ("hapax_ratio", stats.hapax_ratio),
        ("wh_query_rate", stats.wh_query_rate),
        ("wh_token_rate", stats.wh_token_rate),
        ("exact_repeat_rate", stats.exact_repeat_rate),
        ("mean_within_trace_jaccard", stats.mean_within_trace_jaccard),
    ]
    _write_kv(path, rows)


def write_iteration_report(distributions: np.ndarray, path) -> None:
    names = [state.value for state in STATES]
    lines = ["iteration\t" + "\t".join(names)]
    for i, row in enumerate(distributions, start=1):
        lines.append(str(i) + "\t" + "\t".join(_fmt(v) for v in row))
    _write_text(path, "\n".join(lines) + "\n")


def _write_kv(path, rows) -> None:
    lines = ["key\tvalue"]
    lines.extend(f"{key}\t{_fmt(value)}" for key, value in rows)
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
