"""Command-line entry points: trace collection, analysis, and validation.

Exit codes: 0 success, 2 configuration or I/O problems, 3 data validation
failures.  All commands are deterministic: identical inputs produce
byte-identical outputs.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from . import analysis
from .errors import CorruptTrace, InputError, ToolkitError
from .orchestrator import AgentProfile, run_batch
from .protocol import make_generator_factory
from .retrieval import Retriever, RetrieverConfig, load_corpus
from .store import TraceStore, unescape_field

STORE_ENV_VAR = "ATK_STORE"


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _store_root(store: str | None) -> Path:
    root = store or os.environ.get(STORE_ENV_VAR)
    if not root:
        _fail(2, f"no store given (use --store or {STORE_ENV_VAR})")
    return Path(root)


def read_queries_tsv(path: Path) -> list[tuple[str, str]]:
    """Read a (qid, text) TSV with a header row, using the field codec."""
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read queries file: {exc}") from exc
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].split("\t") != ["qid", "text"]:
        raise InputError(f"{path}: expected a TSV with header 'qid<TAB>text'")
    queries = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 2:
            raise InputError(f"{path}:{lineno}: expected 2 columns")
        queries.append((unescape_field(cols[0]), unescape_field(cols[1])))
    return queries


@click.group()
def main():
    """Collect and analyze agentic search traces."""


@main.command("trace")
@click.option("--queries", "queries_path", required=True, type=click.Path(path_type=Path))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(path_type=Path))
@click.option("--profile", "profile_path", required=True, type=click.Path(path_type=Path))
@click.option("--generator", "generator_spec", required=True,
              help="Generator endpoint: cmd:PROGRAM ARGS..., tcp:HOST:PORT, or script:PATH.")
@click.option("--store", "store_path", default=None,
              help=f"Store root (default: ${STORE_ENV_VAR}).")
@click.option("--k-final", default=3, show_default=True,
              help="Documents handed to the generator per search.")
@click.option("--k-first", default=1000, show_default=True,
              help="First-stage candidate pool size.")
@click.option("--truncate", default=512, show_default=True,
              help="Document truncation length in whitespace tokens.")
@click.option("--include-titles/--no-include-titles", default=True, show_default=True)
@click.option("--parallel", default=1, show_default=True, help="Concurrent runs.")
@click.option("--timeout", default=300.0, show_default=True,
              help="Per-run wall-clock timeout in seconds.")
def cmd_trace(queries_path, corpus_path, profile_path, generator_spec, store_path,
              k_final, k_first, truncate, include_titles, parallel, timeout):
    """Run a batch of queries and persist one trace per query."""
    store = TraceStore(_store_root(store_path))
    try:
        queries = read_queries_tsv(queries_path)
        corpus = load_corpus(corpus_path)
        profile = AgentProfile.load(profile_path)
        config = RetrieverConfig(k_first_stage=k_first, k_final=k_final,
                                 truncate_tokens=truncate, include_titles=include_titles)
        retriever = Retriever.build(corpus, config)
        factory = make_generator_factory(generator_spec, timeout=timeout)
        summary = run_batch(queries, factory, retriever, profile, store,
                            parallelism=parallel, timeout_s=timeout)
    except ToolkitError as exc:
        _fail(2, str(exc))
    for status in sorted(summary):
        click.echo(f"{status}={summary[status]}")
    missing = [qid for qid, _ in queries if not store.has(qid)]
    if missing:
        _fail(2, f"{len(missing)} queries left no trace: {', '.join(missing[:5])}")


@main.command("analyze")
@click.argument("which", type=click.Choice(["stats", "transitions", "iterations", "text"]))
@click.option("--store", "store_path", default=None)
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@click.option("--skip-corrupt", is_flag=True, help="Skip unreadable traces instead of failing.")
@click.option("--max-iteration", default=10, show_default=True,
              help="Last iteration stack in the 'iterations' report.")
@click.option("--counts", is_flag=True, help="Write transition counts instead of probabilities.")
@click.option("--human-matrix", "human_matrix_path", default=None,
              type=click.Path(path_type=Path),
              help="Externally supplied human transition matrix for side-by-side display.")
@click.option("--queries", "queries_path", default=None, type=click.Path(path_type=Path),
              help="Organic (qid, text) TSV to fill initial queries of external shards.")
def cmd_analyze(which, store_path, out_path, skip_corrupt, max_iteration, counts,
                human_matrix_path, queries_path):
    """Write a TSV report over a trace store."""
    store = TraceStore(_store_root(store_path))
    try:
        traces, errors = store.read_all(skip_corrupt=True)
    except ToolkitError as exc:
        _fail(2, str(exc))
    if errors and not skip_corrupt:
        for err in errors:
            click.echo(f"corrupt: {err}", err=True)
        _fail(3, f"{len(errors)} corrupt traces (use --skip-corrupt to continue)")

    if queries_path is not None:
        try:
            organic = dict(read_queries_tsv(queries_path))
        except ToolkitError as exc:
            _fail(2, str(exc))
        for trace in traces:
            if not trace.initial_query:
                trace.initial_query = organic.get(trace.qid, "")

    try:
        if which == "stats":
            analysis.write_stats_report(analysis.trace_stats(traces), out_path)
        elif which == "text":
            analysis.write_text_report(analysis.text_stats(traces), out_path)
        elif which == "transitions":
            human = (analysis.read_matrix_tsv(human_matrix_path)
                     if human_matrix_path is not None else None)
            matrix = analysis.build_transition_matrix(traces)
            analysis.write_matrix_report(matrix, out_path, counts=counts, human=human)
        else:
            dists = analysis.per_iteration_distributions(traces, max_iteration)
            analysis.write_iteration_report(dists, out_path)
    except InputError as exc:
        _fail(3, str(exc))
    except (ToolkitError, OSError) as exc:
        _fail(2, str(exc))
    click.echo(f"wrote {out_path}")


@main.command("validate")
@click.option("--store", "store_path", default=None)
def cmd_validate(store_path):
    """Check every stored trace against the artifact schemas and invariants."""
    store = TraceStore(_store_root(store_path))
    violations: list[CorruptTrace] = []
    qids = store.qids()
    for qid in qids:
        try:
            store.read(qid)
        except CorruptTrace as exc:
            violations.append(exc)
    if violations:
        for err in violations:
            click.echo(f"{err.qid or '?'}\t{err.file or '-'}\t{err.line or '-'}\t{err}")
        _fail(3, f"{len(violations)} invalid traces out of {len(qids)}")
    click.echo(f"ok ({len(qids)} traces)")


if __name__ == "__main__":
    main()
