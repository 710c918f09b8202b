"""Sharded on-disk trace store.

Each trace lives in its own directory named by qid and holds four TSV
artifact files plus a small JSON sidecar:

    answers.tsv       qid, answer                 (no data row if unanswered)
    queries.tsv       qid, iteration, llm_query
    thoughts.tsv      qid, iteration, thought
    ranked_lists.tsv  qid, iteration, docid, rank
    meta.json         status, agent, retriever, initial_query,
                      description_kinds (one entry per thoughts.tsv data row)

Files are UTF-8, tab-separated, newline-terminated, with a header row.  Text
fields use a reversible backslash codec so raw text (including tabs and
newlines) survives a round trip unaltered.  Directories without meta.json
are accepted for interoperability with externally produced shards; their
status is inferred from the answers file (answered vs. unknown).
"""
from __future__ import annotations

import json
import shutil
from pathlib import Path

from .errors import CodecError, ContractViolation, CorruptTrace, DuplicateTrace, OrderViolation, StorageError
from .trace import DESCRIPTION_KINDS, THOUGHT, Frame, Trace, TraceStatus

ANSWERS_FILE = "answers.tsv"
QUERIES_FILE = "queries.tsv"
THOUGHTS_FILE = "thoughts.tsv"
RANKED_FILE = "ranked_lists.tsv"
META_FILE = "meta.json"

HEADERS = {
    ANSWERS_FILE: ("qid", "answer"),
    QUERIES_FILE: ("qid", "iteration", "llm_query"),
    THOUGHTS_FILE: ("qid", "iteration", "thought"),
    RANKED_FILE: ("qid", "iteration", "docid", "rank"),
}

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n", "\r": "\\r"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def escape_field(text: str) -> str:
    """Encode a raw text field for TSV storage (reversible)."""
    if not any(c in text for c in "\\\t\n\r"):
        return text
    return "".join(_ESCAPES.get(c, c) for c in text)


def unescape_field(text: str) -> str:
    """Invert :func:`escape_field`; raises CodecError on invalid escapes."""
    if "\\" not in text:
        return text
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if i + 1 >= n:
            raise CodecError("dangling backslash at end of field")
        marker = text[i + 1]
        try:
            out.append(_UNESCAPES[marker])
        except KeyError:
            raise CodecError(f"invalid escape sequence \\{marker}") from None
        i += 2
    return "".join(out)


def _check_qid(qid: str) -> None:
    if not qid or "\x00" in qid or "/" in qid or "\\" in qid or qid.startswith("."):
        raise StorageError(f"qid {qid!r} is not usable as a directory name")


class TraceStore:
    """Directory of per-trace shards; one subdirectory per qid."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path_for(self, qid: str) -> Path:
        return self.root / qid

    def has(self, qid: str) -> bool:
        return self.path_for(qid).is_dir()

    def qids(self) -> list[str]:
        """All stored qids, sorted for deterministic iteration."""
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir()
                      if p.is_dir() and not p.name.startswith("."))

    # -- writing ---------------------------------------------------------

    def write(self, trace: Trace, *, agent: str = "", retriever: str = "",
              extra_meta: dict | None = None) -> None:
        """Persist a finalized trace as a new shard directory.

        Writes into a hidden temp directory first and renames it into place,
        so concurrent writers targeting distinct qids never see partial
        shards.
        """
        if not trace.finalized:
            raise ContractViolation("trace must be finalized before writing")
        _check_qid(trace.qid)
        final = self.path_for(trace.qid)
        if final.exists():
            raise DuplicateTrace(trace.qid)
        tmp = self.root / f".tmp-{trace.qid}"
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            if tmp.exists():
                shutil.rmtree(tmp)
            tmp.mkdir()
            self._write_files(tmp, trace, agent, retriever, extra_meta)
            tmp.rename(final)
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            if final.exists():
                raise DuplicateTrace(trace.qid) from exc
            raise StorageError(f"failed to write trace {trace.qid}: {exc}") from exc

    def _write_files(self, directory: Path, trace: Trace, agent: str,
                     retriever: str, extra_meta: dict | None) -> None:
        qid = escape_field(trace.qid)

        answer_rows = []
        if trace.answer is not None:
            answer_rows.append((qid, escape_field(trace.answer)))

        query_rows = []
        thought_rows = []
        ranked_rows = []
        kinds: list[str] = []
        for frame in trace.frames:
            it = str(frame.iteration)
            query_rows.append((qid, it, escape_field(frame.query)))
            for kind, text in frame.descriptions:
                thought_rows.append((qid, it, escape_field(text)))
                kinds.append(kind)
            for docid, rank in frame.ranked_list:
                ranked_rows.append((qid, it, str(docid), str(rank)))

        _write_tsv(directory / ANSWERS_FILE, HEADERS[ANSWERS_FILE], answer_rows)
        _write_tsv(directory / QUERIES_FILE, HEADERS[QUERIES_FILE], query_rows)
        _write_tsv(directory / THOUGHTS_FILE, HEADERS[THOUGHTS_FILE], thought_rows)
        _write_tsv(directory / RANKED_FILE, HEADERS[RANKED_FILE], ranked_rows)

        meta = {
            "status": trace.status.value,
            "agent": agent,
            "retriever": retriever,
            "initial_query": trace.initial_query,
            "description_kinds": kinds,
        }
        if extra_meta:
            meta.update(extra_meta)
        payload = json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=2)
        (directory / META_FILE).write_text(payload + "\n", encoding="utf-8")

    # -- reading ---------------------------------------------------------

    def read(self, qid: str) -> Trace:
        """Load one trace; write→read is lossless for every finalized trace."""
        directory = self.path_for(qid)
        if not directory.is_dir():
            raise CorruptTrace("trace directory missing", qid=qid)

        answer_rows = self._read_rows(qid, directory, ANSWERS_FILE)
        query_rows = self._read_rows(qid, directory, QUERIES_FILE)
        thought_rows = self._read_rows(qid, directory, THOUGHTS_FILE)
        ranked_rows = self._read_rows(qid, directory, RANKED_FILE)
        meta = self._read_meta(qid, directory)

        if len(answer_rows) > 1:
            raise CorruptTrace("multiple answer rows", qid=qid, file=ANSWERS_FILE,
                               line=answer_rows[1][0])
        answer = unescape_or_corrupt(answer_rows[0][1][1], qid, ANSWERS_FILE,
                                     answer_rows[0][0]) if answer_rows else None

        frames = self._build_frames(qid, query_rows, thought_rows, ranked_rows, meta)

        status = self._resolve_status(qid, meta, answer)
        initial_query = meta.get("initial_query", "") if meta else ""
        if not isinstance(initial_query, str):
            raise CorruptTrace("initial_query must be a string", qid=qid, file=META_FILE)
        try:
            return Trace(qid=qid, initial_query=initial_query, frames=frames,
                         answer=answer, status=status)
        except (ContractViolation, OrderViolation) as exc:
            raise CorruptTrace(str(exc), qid=qid) from exc

    def read_all(self, *, skip_corrupt: bool = False) -> tuple[list[Trace], list[CorruptTrace]]:
        """Load every trace; returns (traces, errors).

        With skip_corrupt=False the first corrupt shard raises; otherwise
        corrupt shards are collected in the error list and skipped.
        """
        traces: list[Trace] = []
        errors: list[CorruptTrace] = []
        for qid in self.qids():
            try:
                traces.append(self.read(qid))
            except CorruptTrace as exc:
                if not skip_corrupt:
                    raise
                errors.append(exc)
        return traces, errors

    def _read_rows(self, qid: str, directory: Path, name: str) -> list[tuple[int, list[str]]]:
        path = directory / name
        if not path.is_file():
            raise CorruptTrace("artifact file missing", qid=qid, file=name)
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise CorruptTrace(f"unreadable artifact file: {exc}", qid=qid, file=name) from exc
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise CorruptTrace("empty artifact file (missing header)", qid=qid, file=name)
        header = HEADERS[name]
        if tuple(lines[0].split("\t")) != header:
            raise CorruptTrace(f"bad header, expected {chr(9).join(header)!r}",
                               qid=qid, file=name, line=1)
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            cols = line.split("\t")
            if len(cols) != len(header):
                raise CorruptTrace(f"expected {len(header)} columns, got {len(cols)}",
                                   qid=qid, file=name, line=lineno)
            if unescape_or_corrupt(cols[0], qid, name, lineno) != qid:
                raise CorruptTrace(f"row qid {cols[0]!r} does not match directory",
                                   qid=qid, file=name, line=lineno)
            rows.append((lineno, cols))
        return rows

    def _read_meta(self, qid: str, directory: Path) -> dict | None:
        path = directory / META_FILE
        if not path.is_file():
            return None
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptTrace(f"unreadable meta sidecar: {exc}", qid=qid, file=META_FILE) from exc
        if not isinstance(meta, dict):
            raise CorruptTrace("meta sidecar must be a JSON object", qid=qid, file=META_FILE)
        return meta

    def _build_frames(self, qid: str, query_rows, thought_rows, ranked_rows,
                      meta: dict | None) -> list[Frame]:
        kinds = meta.get("description_kinds") if meta else None
        if kinds is not None:
            if (not isinstance(kinds, list)
                    or any(k not in DESCRIPTION_KINDS for k in kinds)):
                raise CorruptTrace("invalid description_kinds", qid=qid, file=META_FILE)
            if len(kinds) != len(thought_rows):
                raise CorruptTrace(
                    f"description_kinds has {len(kinds)} entries for "
                    f"{len(thought_rows)} thoughts rows", qid=qid, file=META_FILE)
        else:
            kinds = [THOUGHT] * len(thought_rows)

        frames: list[Frame] = []
        by_iteration: dict[int, Frame] = {}
        for lineno, cols in query_rows:
            iteration = int_or_corrupt(cols[1], qid, QUERIES_FILE, lineno)
            if iteration != len(frames):
                raise CorruptTrace(f"iteration ids must be consecutive from 0, got {iteration}",
                                   qid=qid, file=QUERIES_FILE, line=lineno)
            query = unescape_or_corrupt(cols[2], qid, QUERIES_FILE, lineno)
            if not query:
                raise CorruptTrace("empty llm_query", qid=qid, file=QUERIES_FILE, line=lineno)
            frame = Frame(iteration=iteration, query=query)
            frames.append(frame)
            by_iteration[iteration] = frame

        for (lineno, cols), kind in zip(thought_rows, kinds):
            iteration = int_or_corrupt(cols[1], qid, THOUGHTS_FILE, lineno)
            frame = by_iteration.get(iteration)
            if frame is None:
                raise CorruptTrace(f"thought for unknown iteration {iteration}",
                                   qid=qid, file=THOUGHTS_FILE, line=lineno)
            text = unescape_or_corrupt(cols[2], qid, THOUGHTS_FILE, lineno)
            frame.descriptions.append((kind, text))

        for lineno, cols in ranked_rows:
            iteration = int_or_corrupt(cols[1], qid, RANKED_FILE, lineno)
            frame = by_iteration.get(iteration)
            if frame is None:
                raise CorruptTrace(f"ranked row for unknown iteration {iteration}",
                                   qid=qid, file=RANKED_FILE, line=lineno)
            docid = int_or_corrupt(cols[2], qid, RANKED_FILE, lineno)
            rank = int_or_corrupt(cols[3], qid, RANKED_FILE, lineno)
            if rank != len(frame.ranked_list) + 1:
                raise CorruptTrace(
                    f"ranks must be consecutive from 1 per iteration, got {rank}",
                    qid=qid, file=RANKED_FILE, line=lineno)
            frame.ranked_list.append((docid, rank))

        return frames

    def _resolve_status(self, qid: str, meta: dict | None, answer: str | None) -> TraceStatus:
        if meta is None or "status" not in meta:
            return TraceStatus.ANSWERED if answer is not None else TraceStatus.UNKNOWN
        raw = meta["status"]
        try:
            status = TraceStatus(raw)
        except ValueError:
            raise CorruptTrace(f"unknown status {raw!r}", qid=qid, file=META_FILE) from None
        if status is TraceStatus.IN_PROGRESS:
            raise CorruptTrace("stored trace cannot be in_progress", qid=qid, file=META_FILE)
        return status


def _write_tsv(path: Path, header: tuple[str, ...], rows) -> None:
    parts = ["\t".join(header) + "\n"]
    for row in rows:
        parts.append("\t".join(row) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("".join(parts))


def int_or_corrupt(raw: str, qid: str, file: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise CorruptTrace(f"expected an integer, got {raw!r}",
                           qid=qid, file=file, line=line) from None


def unescape_or_corrupt(raw: str, qid: str, file: str, line: int) -> str:
    try:
        return unescape_field(raw)
    except CodecError as exc:
        raise CorruptTrace(str(exc), qid=qid, file=file, line=line) from exc
