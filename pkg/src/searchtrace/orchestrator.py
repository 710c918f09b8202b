"""The decode-parse-retrieve loop that produces traces.

One run takes an initial query, builds the agent prompt, and then
alternates: request generation (stopping at the search or answer close
tag), parse the returned text for control tags, and on a search event log
the query, retrieve, and append an information block to the context.  The
loop ends on an answer, a malformed output, a generator failure, or the
iteration cap; every ending is recorded as a trace status and partial
frames are always retained.

Integrity rules: the context grows only by generated text and inserted
information blocks, the initial query is substituted into the prompt
verbatim, and retrieved docids are logged before any formatting.
"""
from __future__ import annotations

import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (DuplicateTrace, GeneratorError, InputError, ParseError,
                     ProtocolError, RerankError)
from .protocol import GenerateRequest, GenerateReply, find_earliest_stop
from .retrieval import Retriever
from .store import TraceStore
from .tagparser import StreamTagParser, TagKind
from .trace import REFINEMENT, THOUGHT, Frame, Trace, TraceStatus

ROLE_THINK = "think"
ROLE_SEARCH = "search"
ROLE_INFORMATION = "information"
ROLE_ANSWER = "answer"
ROLE_REFINE = "refine"
REQUIRED_ROLES = (ROLE_THINK, ROLE_SEARCH, ROLE_INFORMATION, ROLE_ANSWER)

QUESTION_PLACEHOLDER = "{question}"


@dataclass(frozen=True)
class AgentProfile:
    """Per-agent configuration: prompt template, tag names, and limits.

    ``doc_template``/``doc_template_untitled`` override how retrieved
    documents are rendered inside information blocks for agents trained on
    a different serialization (placeholders: {rank}, {title}, {body}).
    """

    name: str
    prompt_template: str
    tags: dict[str, str]
    max_iterations: int = 256
    max_tokens_per_call: int = 1024
    doc_template: str | None = None
    doc_template_untitled: str | None = None

    def __post_init__(self):
        if self.prompt_template.count(QUESTION_PLACEHOLDER) != 1:
            raise InputError("prompt_template must contain exactly one {question}")
        for template in (self.doc_template, self.doc_template_untitled):
            if template is None:
                continue
            try:
                template.format(rank=1, title="t", body="b")
            except (KeyError, IndexError, ValueError) as exc:
                raise InputError(f"invalid document template {template!r}: {exc}") from exc
        for role in REQUIRED_ROLES:
            if role not in self.tags:
                raise InputError(f"profile is missing the {role} tag name")
        for role, name in self.tags.items():
            if role not in REQUIRED_ROLES + (ROLE_REFINE,):
                raise InputError(f"unknown tag role {role!r}")
            if not name or any(c in name for c in "<>/") or name != name.strip():
                raise InputError(f"invalid tag name {name!r} for role {role}")
        if len(set(self.tags.values())) != len(self.tags):
            raise InputError("tag names must be distinct")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if self.max_tokens_per_call < 1:
            raise InputError("max_tokens_per_call must be >= 1")

    @property
    def has_refine(self) -> bool:
        return ROLE_REFINE in self.tags

    def parser_tags(self) -> dict[TagKind, str]:
        tags = {TagKind.THINK: self.tags[ROLE_THINK],
                TagKind.SEARCH: self.tags[ROLE_SEARCH],
                TagKind.ANSWER: self.tags[ROLE_ANSWER]}
        if self.has_refine:
            tags[TagKind.REFINE] = self.tags[ROLE_REFINE]
        return tags

    def stop_sequences(self) -> list[str]:
        return [f"</{self.tags[ROLE_SEARCH]}>", f"</{self.tags[ROLE_ANSWER]}>"]

    @classmethod
    def from_dict(cls, payload: dict) -> "AgentProfile":
        if not isinstance(payload, dict):
            raise InputError("profile must be a JSON object")
        try:
            return cls(
                name=payload["name"],
                prompt_template=payload["prompt_template"],
                tags=dict(payload["tags"]),
                max_iterations=payload.get("max_iterations", 256),
                max_tokens_per_call=payload.get("max_tokens_per_call", 1024),
                doc_template=payload.get("doc_template"),
                doc_template_untitled=payload.get("doc_template_untitled"),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"invalid profile: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "AgentProfile":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot load profile {path}: {exc}") from exc
        return cls.from_dict(payload)


@dataclass
class RunOutcome:
    trace: Trace
    wall_time: float
    generator_calls: int
    search_calls: int
    rerank_fallbacks: list[int] = field(default_factory=list)


def build_prompt(initial_query: str, profile: AgentProfile) -> str:
    """Substitute the organic query into the template, verbatim.

    No reformulation, decomposition, or hinting happens here; the query
    string is inserted exactly as received.
    """
    if not initial_query or not initial_query.strip():
        raise InputError("initial query must be non-empty")
    return profile.prompt_template.replace(QUESTION_PLACEHOLDER, initial_query)


def run_arun(initial_query: str, qid: str, generator, retriever: Retriever,
             profile: AgentProfile, *, timeout_s: float = 300.0,
             audit: list[tuple[str, str]] | None = None) -> RunOutcome:
    """Execute one agentic run; never raises, all failures land in the status.

    ``audit``, when given, collects (kind, text) pairs for every context
    extension (prompt, generated, information) so tests can verify context
    integrity byte for byte.
    """
    start = time.monotonic()
    context = build_prompt(initial_query, profile)
    trace = Trace(qid=qid, initial_query=initial_query)
    generator_calls = 0
    rerank_fallbacks: list[int] = []
    if audit is not None:
        audit.append(("prompt", context))

    parser = StreamTagParser(profile.parser_tags())
    stop_seqs = profile.stop_sequences()
    information_tag = profile.tags[ROLE_INFORMATION]
    pending: list[tuple[str, str]] = []

    while True:
        if len(trace.frames) >= profile.max_iterations:
            trace.finalize(None, TraceStatus.ITERATION_CAP)
            break
        if time.monotonic() - start > timeout_s:
            trace.finalize(None, TraceStatus.GENERATOR_ERROR)
            break

        request = GenerateRequest(request_id=f"{qid}:{generator_calls}",
                                  context=context, stop_sequences=list(stop_seqs),
                                  max_tokens=profile.max_tokens_per_call)
        try:
            reply: GenerateReply = generator.generate(request)
        except (GeneratorError, ProtocolError, OSError) as _exc:
            trace.finalize(None, TraceStatus.GENERATOR_ERROR)
            break
        generator_calls += 1

        if reply.finish_reason == "error":
            trace.finalize(None, TraceStatus.GENERATOR_ERROR)
            break
        text = reply.text
        if reply.finish_reason == "stop":
            # Defense in depth: the generator's stop claim must be real.
            if reply.matched_stop not in stop_seqs or reply.matched_stop not in text:
                trace.finalize(None, TraceStatus.GENERATOR_ERROR)
                break
        # Enforce stops on our side too, so overrunning generators cannot
        # smuggle text past the close tag into the context or the parser.
        hit = find_earliest_stop(text, stop_seqs)
        if hit is not None:
            text = text[:hit[0]]

        try:
            events, _stop = parser.feed(text)
        except ParseError:
            trace.finalize(None, TraceStatus.PARSE_ERROR)
            break
        context += text
        if audit is not None:
            audit.append(("generated", text))

        acted = None
        for event in events:
            if acted is not None:
                break
            if event.kind is TagKind.THINK:
                pending.append((THOUGHT, event.content))
            elif event.kind is TagKind.REFINE:
                # Refinements describe the retrieval they follow, so they
                # attach to the frame of the previous iteration.
                if trace.frames:
                    trace.frames[-1].descriptions.append((REFINEMENT, event.content))
                else:
                    pending.append((REFINEMENT, event.content))
            elif event.kind is TagKind.SEARCH:
                query = event.content
                if not query:
                    trace.finalize(None, TraceStatus.PARSE_ERROR)
                    acted = "failed"
                    break
                try:
                    result = retriever.retrieve(query)
                except RerankError:
                    result = retriever.retrieve(query, use_reranker=False)
                    rerank_fallbacks.append(len(trace.frames))
                ranked = [(docid, rank) for rank, (docid, _score)
                          in enumerate(result, start=1)]
                trace.append_frame(Frame(iteration=len(trace.frames), query=query,
                                         ranked_list=ranked, descriptions=pending))
                pending = []
                block = retriever.information_block(
                    result, tag=information_tag,
                    doc_template=profile.doc_template,
                    doc_template_untitled=profile.doc_template_untitled)
                context += block
                if audit is not None:
                    audit.append(("information", block))
                acted = "search"
            elif event.kind is TagKind.ANSWER:
                trace.finalize(event.content, TraceStatus.ANSWERED)
                acted = "answer"

        if trace.finalized:
            break
        if acted == "search":
            continue
        # The reply ran out without an actionable tag: the model stalled,
        # overran its token budget mid-tag, or emitted a stray close tag.
        try:
            parser.finish()
        except ParseError:
            pass
        trace.finalize(None, TraceStatus.PARSE_ERROR)
        break

    return RunOutcome(trace=trace, wall_time=time.monotonic() - start,
                      generator_calls=generator_calls,
                      search_calls=len(trace.frames),
                      rerank_fallbacks=rerank_fallbacks)


def run_batch(queries: list[tuple[str, str]], generator_factory, retriever: Retriever,
              profile: AgentProfile, store: TraceStore, *, parallelism: int = 1,
              timeout_s: float = 300.0) -> dict[str, int]:
    """Run every (qid, query) pair and persist one trace each.

    Already-stored qids are skipped, which makes interrupted batches
    resumable.  Failures are isolated per run; the returned summary counts
    traces by status plus a ``skipped`` entry.
    """
    qids = [qid for qid, _ in queries]
    if len(set(qids)) != len(qids):
        raise InputError("duplicate qids in the query batch")
    for qid, query in queries:
        if not query or not query.strip():
            raise InputError(f"query {qid} has empty text")
    if parallelism < 1:
        raise InputError("parallelism must be >= 1")

    def one(item: tuple[str, str]) -> str:
        qid, query = item
        if store.has(qid):
            return "skipped"
        generator = generator_factory(qid)
        try:
            outcome = run_arun(query, qid, generator, retriever, profile,
                               timeout_s=timeout_s)
        finally:
            close = getattr(generator, "close", None)
            if close is not None:
                close()
        extra = {"rerank_fallbacks": outcome.rerank_fallbacks} \
            if outcome.rerank_fallbacks else None
        try:
            store.write(outcome.trace, agent=profile.name,
                        retriever=retriever.describe(), extra_meta=extra)
        except DuplicateTrace:
            return "skipped"
        return outcome.trace.status.value

    if parallelism == 1:
        results = [one(item) for item in queries]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, queries))
    return dict(Counter(results))
