"""In-memory BM25 retrieval with a re-ranker hook and information-block formatting.

The pipeline mirrors a classic two-stage setup: BM25 over an inverted index
retrieves up to ``k_first_stage`` candidates, an optional external scorer
re-ranks them, and the top ``k_final`` documents are serialized into an
information block for the generator context.

Scoring uses the Robertson idf with +1 smoothing, which keeps idf strictly
positive:

    idf(t)   = ln(1 + (N - df + 0.5) / (df + 0.5))
    score(d) = sum over query terms of idf(t) * tf * (k1 + 1)
               / (tf + k1 * (1 - b + b * dl / avgdl))

Tokenization is lowercase alphanumeric runs, no stemming, no stopwords.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import CorpusError, DuplicateDocId, InputError, NotIndexed, RerankError

# (docid, score) pairs, scores non-increasing, ties broken by ascending docid
RetrievalResult = list[tuple[int, float]]

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    docid: int
    body: str
    title: str | None = None


@dataclass(frozen=True)
class RetrieverConfig:
    """Pipeline knobs; defaults follow the common k=3 / top-1000 setup."""

    k_first_stage: int = 1000
    k_final: int = 3
    truncate_tokens: int = 512
    include_titles: bool = True
    bm25_k1: float = 1.2
    bm25_b: float = 0.75

    def __post_init__(self):
        if not 1 <= self.k_final <= self.k_first_stage:
            raise InputError(
                f"need 1 <= k_final <= k_first_stage, got {self.k_final}/{self.k_first_stage}")
        if self.truncate_tokens < 1:
            raise InputError("truncate_tokens must be >= 1")


class Index:
    """Immutable inverted index: postings, document lengths, and the corpus."""

    def __init__(self, postings: dict[str, dict[int, int]], doc_len: dict[int, int],
                 avgdl: float, docs: dict[int, Document]):
        self.postings = postings
        self.doc_len = doc_len
        self.avgdl = avgdl
        self.docs = docs

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)


def build_index(corpus: list[Document], *, include_titles: bool = True) -> Index:
    """Index a corpus; titles are indexed with bodies unless disabled."""
    postings: dict[str, dict[int, int]] = {}
    doc_len: dict[int, int] = {}
    docs: dict[int, Document] = {}
    for doc in corpus:
        if doc.docid in docs:
            raise DuplicateDocId(f"docid {doc.docid} appears twice in the corpus")
        docs[doc.docid] = doc
        text = doc.body
        if include_titles and doc.title:
            text = doc.title + " " + text
        tokens = tokenize(text)
        doc_len[doc.docid] = len(tokens)
        for term in tokens:
            bucket = postings.setdefault(term, {})
            bucket[doc.docid] = bucket.get(doc.docid, 0) + 1
    total = sum(doc_len.values())
    avgdl = total / len(doc_len) if doc_len else 0.0
    return Index(postings, doc_len, avgdl, docs)


def bm25_score(index: Index, query_terms: list[str], docid: int, *,
               k1: float = 1.2, b: float = 0.75) -> float:
    """BM25 score of one document; terms absent from the corpus contribute 0."""
    if docid not in index.doc_len:
        raise NotIndexed(f"docid {docid} is not indexed")
    dl = index.doc_len[docid]
    rel_len = dl / index.avgdl if index.avgdl > 0 else 0.0
    score = 0.0
    for term in query_terms:
        bucket = index.postings.get(term)
        if not bucket:
            continue
        tf = bucket.get(docid, 0)
        if not tf:
            continue
        df = len(bucket)
        idf = math.log(1.0 + (index.n_docs - df + 0.5) / (df + 0.5))
        score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * rel_len))
    return score


def search(index: Index, query: str, config: RetrieverConfig,
           reranker: Callable[[str, int], float] | None = None) -> RetrievalResult:
    """Top documents for a query; may legitimately be empty.

    Candidates are documents sharing at least one query term; zero-score
    documents are excluded, so out-of-vocabulary or empty queries yield an
    empty retrieval.  Ordering is (score desc, docid asc), truncated to
    ``k_first_stage`` before the re-rank hook and ``k_final`` after it.
    """
    terms = tokenize(query)
    candidates: set[int] = set()
    for term in set(terms):
        bucket = index.postings.get(term)
        if bucket:
            candidates.update(bucket.keys())
    scored = [(docid, bm25_score(index, terms, docid, k1=config.bm25_k1, b=config.bm25_b))
              for docid in candidates]
    scored = [entry for entry in scored if entry[1] > 0.0]
    scored.sort(key=lambda entry: (-entry[1], entry[0]))
    first_stage = scored[:config.k_first_stage]
    if reranker is None:
        return first_stage[:config.k_final]
    return rerank_hook(first_stage, query, reranker, k_final=config.k_final)


def rerank_hook(result: RetrievalResult, query: str,
                scorer: Callable[[str, int], float], *, k_final: int) -> RetrievalResult:
    """Re-sort a first-stage result with an external scorer.

    The scorer must be total over the (query, docid) pairs in the result;
    any exception it raises surfaces as RerankError so the caller can fall
    back to the first-stage order.
    """
    rescored = []
    for docid, _score in result:
        try:
            rescored.append((docid, float(scorer(query, docid))))
        except Exception as exc:
            raise RerankError(f"re-ranker failed on docid {docid}: {exc}") from exc
    rescored.sort(key=lambda entry: (-entry[1], entry[0]))
    return rescored[:k_final]


DOC_TEMPLATE = "Doc {rank}(Title: {title}) {body}"
DOC_TEMPLATE_UNTITLED = "Doc {rank} {body}"


def format_information_block(result: RetrievalResult, docs: dict[int, Document],
                             config: RetrieverConfig, *, tag: str = "information",
                             doc_template: str | None = None,
                             doc_template_untitled: str | None = None) -> str:
    """Serialize retrieved documents for insertion into the generator context.

    One line per document, by default ``Doc {rank}(Title: {title}) {body}``
    with the title clause omitted when absent or disabled; agents trained on
    a different serialization can override both templates.  Bodies are
    whitespace normalized and truncated to ``truncate_tokens`` whitespace
    tokens.  An empty retrieval produces an empty block.
    """
    titled = doc_template or DOC_TEMPLATE
    untitled = doc_template_untitled or DOC_TEMPLATE_UNTITLED
    lines = []
    for rank, (docid, _score) in enumerate(result, start=1):
        doc = docs.get(docid)
        if doc is None:
            raise CorpusError(f"docid {docid} not found in the corpus")
        body = " ".join(doc.body.split()[:config.truncate_tokens])
        if config.include_titles and doc.title:
            lines.append(titled.format(rank=rank, title=doc.title, body=body))
        else:
            lines.append(untitled.format(rank=rank, title="", body=body))
    return f"<{tag}>" + "\n".join(lines) + f"</{tag}>"


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSON-lines corpus with fields docid, text, and optional title."""
    corpus: list[Document] = []
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file: {exc}") from exc
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"corpus line {lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or "docid" not in obj or "text" not in obj:
            raise CorpusError(f"corpus line {lineno}: need docid and text fields")
        docid = obj["docid"]
        if not isinstance(docid, int) or isinstance(docid, bool):
            raise CorpusError(f"corpus line {lineno}: docid must be an integer")
        title = obj.get("title")
        if title is not None and not isinstance(title, str):
            raise CorpusError(f"corpus line {lineno}: title must be a string")
        if not isinstance(obj["text"], str):
            raise CorpusError(f"corpus line {lineno}: text must be a string")
        corpus.append(Document(docid=docid, body=obj["text"], title=title))
    return corpus


def result_to_runfile_lines(qid: str, result: RetrievalResult, *,
                            tag: str = "searchtrace") -> list[str]:
    """Render a result in the standard six-column run-file format."""
    return [f"{qid} Q0 {docid} {rank} {score} {tag}"
            for rank, (docid, score) in enumerate(result, start=1)]


class Retriever:
    """Index + config + optional re-ranker, bundled for the run loop."""

    def __init__(self, index: Index, config: RetrieverConfig,
                 reranker: Callable[[str, int], float] | None = None):
        self.index = index
        self.config = config
        self.reranker = reranker

    @classmethod
    def build(cls, corpus: list[Document], config: RetrieverConfig,
              reranker: Callable[[str, int], float] | None = None) -> "Retriever":
        index = build_index(corpus, include_titles=config.include_titles)
        return cls(index, config, reranker)

    def retrieve(self, query: str, *, use_reranker: bool = True) -> RetrievalResult:
        reranker = self.reranker if use_reranker else None
        return search(self.index, query, self.config, reranker)

    def information_block(self, result: RetrievalResult, *, tag: str = "information",
                          doc_template: str | None = None,
                          doc_template_untitled: str | None = None) -> str:
        return format_information_block(
            result, self.index.docs, self.config, tag=tag,
            doc_template=doc_template, doc_template_untitled=doc_template_untitled)

    def describe(self) -> str:
        c = self.config
        parts = [f"bm25(k1={c.bm25_k1},b={c.bm25_b})",
                 f"k_first={c.k_first_stage}", f"k_final={c.k_final}",
                 f"truncate={c.truncate_tokens}", f"titles={str(c.include_titles).lower()}"]
        if self.reranker is not None:
            parts.append("reranked")
        return " ".join(parts)
