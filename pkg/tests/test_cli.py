from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from searchtrace.cli import main, read_queries_tsv
from searchtrace.errors import InputError
from searchtrace.store import TraceStore
from searchtrace.trace import Frame, Trace, TraceStatus


@pytest.fixture
def runner():
    return CliRunner()


def write_inputs(tmp_path, queries=(("q1", "what is a"), ("q2", "what is b"),
                                    ("q3", "what is c"))):
    queries_path = tmp_path / "queries.tsv"
    queries_path.write_text(
        "qid\ttext\n" + "".join(f"{qid}\t{text}\n" for qid, text in queries),
        encoding="utf-8")
    corpus_path = tmp_path / "corpus.jsonl"
    corpus_path.write_text(
        '{"docid": 1, "text": "a a b", "title": "One"}\n'
        '{"docid": 2, "text": "b c", "title": "Two"}\n', encoding="utf-8")
    profile_path = tmp_path / "profile.json"
    profile_path.write_text(json.dumps({
        "name": "cli-test", "prompt_template": "Q: {question}\n",
        "tags": {"think": "think", "search": "search",
                 "information": "information", "answer": "answer"},
        "max_iterations": 5, "max_tokens_per_call": 128}), encoding="utf-8")
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps({"entries": [
        {"response": "<search>a b</search>"},
        {"response": "<answer>done</answer>", "trigger": "context_contains",
         "trigger_text": "</information>"},
    ]}), encoding="utf-8")
    return queries_path, corpus_path, profile_path, script_path


def trace_args(tmp_path, store, extra=()):
    queries_path, corpus_path, profile_path, script_path = write_inputs(tmp_path)
    return ["trace", "--queries", str(queries_path), "--corpus", str(corpus_path),
            "--profile", str(profile_path), "--generator", f"script:{script_path}",
            "--store", str(store), *extra]


def seed_store(root):
    """Two hand-crafted traces with known reformulation transitions."""
    store = TraceStore(root)
    store.write(Trace(
        qid="t1", initial_query="who won the 2020 election",
        frames=[Frame(iteration=0, query="election winner 2020"),
                Frame(iteration=1, query="election winner 2020")],
        answer="someone", status=TraceStatus.ANSWERED))
    store.write(Trace(qid="t2", initial_query="direct question",
                      answer="direct", status=TraceStatus.ANSWERED))
    return store


# -- trace command ------------------------------------------------------------------

def test_cmd_trace_runs_batch(tmp_path, runner):
    store = tmp_path / "store"
    result = runner.invoke(main, trace_args(tmp_path, store))
    assert result.exit_code == 0, result.output
    assert "answered=3" in result.output
    assert sorted(TraceStore(store).qids()) == ["q1", "q2", "q3"]


def test_cmd_trace_missing_corpus_exits_2(tmp_path, runner):
    store = tmp_path / "store"
    args = trace_args(tmp_path, store)
    corpus_index = args.index("--corpus") + 1
    args[corpus_index] = str(tmp_path / "nope.jsonl")
    result = runner.invoke(main, args)
    assert result.exit_code == 2


def test_cmd_trace_resume_only_runs_remainder(tmp_path, runner):
    store_root = tmp_path / "store"
    store = TraceStore(store_root)
    store.write(Trace(qid="q1", initial_query="what is a", answer="preexisting",
                      status=TraceStatus.ANSWERED))
    before = (store_root / "q1" / "answers.tsv").read_bytes()
    result = runner.invoke(main, trace_args(tmp_path, store_root))
    assert result.exit_code == 0, result.output
    assert "answered=2" in result.output
    assert "skipped=1" in result.output
    assert (store_root / "q1" / "answers.tsv").read_bytes() == before
    assert store.read("q1").answer == "preexisting"


def test_cmd_trace_store_from_env(tmp_path, runner, monkeypatch):
    store = tmp_path / "env-store"
    monkeypatch.setenv("ATK_STORE", str(store))
    args = trace_args(tmp_path, store)
    args = [a for i, a in enumerate(args)
            if not (a == "--store" or (i > 0 and args[i - 1] == "--store"))]
    result = runner.invoke(main, args)
    assert result.exit_code == 0, result.output
    assert TraceStore(store).qids() == ["q1", "q2", "q3"]


def test_cmd_trace_no_store_exits_2(tmp_path, runner, monkeypatch):
    monkeypatch.delenv("ATK_STORE", raising=False)
    args = trace_args(tmp_path, tmp_path / "s")
    args = [a for i, a in enumerate(args)
            if not (a == "--store" or (i > 0 and args[i - 1] == "--store"))]
    result = runner.invoke(main, args)
    assert result.exit_code == 2


# -- analyze command -----------------------------------------------------------------

EXPECTED_COUNTS_TSV = (
    "state\tIN\tADD\tREM\tREP\tDUP\tCH\tOUT\n"
    "IN\t0\t0\t0\t0\t0\t1\t1\n"
    "ADD\t0\t0\t0\t0\t0\t0\t0\n"
    "REM\t0\t0\t0\t0\t0\t0\t0\n"
    "REP\t0\t0\t0\t0\t0\t0\t1\n"
    "DUP\t0\t0\t0\t0\t0\t0\t0\n"
    "CH\t0\t0\t0\t1\t0\t0\t0\n"
    "OUT\t0\t0\t0\t0\t0\t0\t0\n")


def test_cmd_analyze_transitions_counts_golden(tmp_path, runner):
    seed_store(tmp_path / "store")
    out = tmp_path / "matrix.tsv"
    result = runner.invoke(main, ["analyze", "transitions", "--store",
                                  str(tmp_path / "store"), "--out", str(out),
                                  "--counts"])
    assert result.exit_code == 0, result.output
    assert out.read_text(encoding="utf-8") == EXPECTED_COUNTS_TSV


def test_cmd_analyze_transitions_probabilities_row_values(tmp_path, runner):
    seed_store(tmp_path / "store")
    out = tmp_path / "matrix.tsv"
    result = runner.invoke(main, ["analyze", "transitions", "--store",
                                  str(tmp_path / "store"), "--out", str(out)])
    assert result.exit_code == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    in_row = lines[1].split("\t")
    assert in_row[0] == "IN"
    assert in_row[6] == "0.5" and in_row[7] == "0.5"


def test_cmd_analyze_outputs_deterministic(tmp_path, runner):
    seed_store(tmp_path / "store")
    outputs = []
    for name in ("a.tsv", "b.tsv"):
        out = tmp_path / name
        result = runner.invoke(main, ["analyze", "stats", "--store",
                                      str(tmp_path / "store"), "--out", str(out)])
        assert result.exit_code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_cmd_analyze_stats_content(tmp_path, runner):
    seed_store(tmp_path / "store")
    out = tmp_path / "stats.tsv"
    runner.invoke(main, ["analyze", "stats", "--store", str(tmp_path / "store"),
                         "--out", str(out)])
    text = out.read_text(encoding="utf-8")
    assert "traces\t2\n" in text
    assert "answers\t2\n" in text
    assert "search_calls\t2\n" in text
    assert "trace_length_mean\t1.0\n" in text
    assert "trace_length_std\t1.0\n" in text
    assert "trace_length_max\t2\n" in text
    assert "query_length_mean\t3.0\n" in text


def test_cmd_analyze_text_content(tmp_path, runner):
    seed_store(tmp_path / "store")
    out = tmp_path / "text.tsv"
    runner.invoke(main, ["analyze", "text", "--store", str(tmp_path / "store"),
                         "--out", str(out)])
    text = out.read_text(encoding="utf-8")
    assert "hapax_ratio\t0.0\n" in text
    assert "exact_repeat_rate\t0.5\n" in text
    assert "mean_within_trace_jaccard\t1.0\n" in text


def test_cmd_analyze_iterations_report(tmp_path, runner):
    seed_store(tmp_path / "store")
    out = tmp_path / "iterations.tsv"
    result = runner.invoke(main, ["analyze", "iterations", "--store",
                                  str(tmp_path / "store"), "--out", str(out),
                                  "--max-iteration", "3"])
    assert result.exit_code == 0
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "iteration\tIN\tADD\tREM\tREP\tDUP\tCH\tOUT"
    assert lines[1].split("\t")[6] == "1.0"   # stack 1 is all CH
    assert lines[2].split("\t")[4] == "1.0"   # stack 2 is all REP
    assert lines[3] == "3\t0.0\t0.0\t0.0\t0.0\t0.0\t0.0\t0.0"


def test_cmd_analyze_corrupt_store_exits_3(tmp_path, runner):
    seed_store(tmp_path / "store")
    (tmp_path / "store" / "t1" / "ranked_lists.tsv").unlink()
    out = tmp_path / "stats.tsv"
    result = runner.invoke(main, ["analyze", "stats", "--store",
                                  str(tmp_path / "store"), "--out", str(out)])
    assert result.exit_code == 3
    result = runner.invoke(main, ["analyze", "stats", "--store",
                                  str(tmp_path / "store"), "--out", str(out),
                                  "--skip-corrupt"])
    assert result.exit_code == 0
    assert "traces\t1\n" in out.read_text(encoding="utf-8")


def test_cmd_analyze_transitions_with_human_matrix(tmp_path, runner):
    seed_store(tmp_path / "store")
    agent_out = tmp_path / "agent.tsv"
    runner.invoke(main, ["analyze", "transitions", "--store", str(tmp_path / "store"),
                         "--out", str(agent_out)])
    combined = tmp_path / "combined.tsv"
    result = runner.invoke(main, ["analyze", "transitions", "--store",
                                  str(tmp_path / "store"), "--out", str(combined),
                                  "--human-matrix", str(agent_out)])
    assert result.exit_code == 0, result.output
    lines = combined.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("source\tstate\t")
    assert sum(1 for line in lines if line.startswith("agent\t")) == 7
    assert sum(1 for line in lines if line.startswith("human\t")) == 7


def test_cmd_analyze_transitions_external_shard_needs_queries(tmp_path, runner):
    store_root = tmp_path / "store"
    base = store_root / "ext1"
    base.mkdir(parents=True)
    (base / "answers.tsv").write_text("qid\tanswer\next1\tfine\n", encoding="utf-8")
    (base / "queries.tsv").write_text(
        "qid\titeration\tllm_query\next1\t0\tsub query\n", encoding="utf-8")
    (base / "thoughts.tsv").write_text("qid\titeration\tthought\n", encoding="utf-8")
    (base / "ranked_lists.tsv").write_text("qid\titeration\tdocid\trank\n",
                                           encoding="utf-8")
    out = tmp_path / "matrix.tsv"
    result = runner.invoke(main, ["analyze", "transitions", "--store",
                                  str(store_root), "--out", str(out)])
    assert result.exit_code == 3
    organic = tmp_path / "organic.tsv"
    organic.write_text("qid\ttext\next1\toriginal question\n", encoding="utf-8")
    result = runner.invoke(main, ["analyze", "transitions", "--store",
                                  str(store_root), "--out", str(out),
                                  "--queries", str(organic)])
    assert result.exit_code == 0, result.output


# -- validate command ------------------------------------------------------------------

def test_cmd_validate_clean_store(tmp_path, runner):
    seed_store(tmp_path / "store")
    result = runner.invoke(main, ["validate", "--store", str(tmp_path / "store")])
    assert result.exit_code == 0
    assert "ok (2 traces)" in result.output


def test_cmd_validate_reports_iteration_gap(tmp_path, runner):
    seed_store(tmp_path / "store")
    queries = tmp_path / "store" / "t1" / "queries.tsv"
    text = queries.read_text(encoding="utf-8").replace("t1\t1\t", "t1\t3\t")
    queries.write_text(text, encoding="utf-8")
    result = runner.invoke(main, ["validate", "--store", str(tmp_path / "store")])
    assert result.exit_code == 3
    assert "t1" in result.output
    assert "queries.tsv" in result.output


def test_cmd_validate_accepts_external_format_shard(tmp_path, runner):
    store_root = tmp_path / "store"
    base = store_root / "ext9"
    base.mkdir(parents=True)
    (base / "answers.tsv").write_text("qid\tanswer\next9\tyes\n", encoding="utf-8")
    (base / "queries.tsv").write_text(
        "qid\titeration\tllm_query\next9\t0\tq one\next9\t1\tq two\n", encoding="utf-8")
    (base / "thoughts.tsv").write_text(
        "qid\titeration\tthought\next9\t0\tthinking\n", encoding="utf-8")
    (base / "ranked_lists.tsv").write_text(
        "qid\titeration\tdocid\trank\next9\t0\t5\t1\next9\t0\t9\t2\n", encoding="utf-8")
    result = runner.invoke(main, ["validate", "--store", str(store_root)])
    assert result.exit_code == 0, result.output


# -- query file parsing -----------------------------------------------------------------

def test_read_queries_tsv_unescapes(tmp_path):
    path = tmp_path / "queries.tsv"
    path.write_text("qid\ttext\nq1\ttab\\there\n", encoding="utf-8")
    assert read_queries_tsv(path) == [("q1", "tab\there")]


def test_read_queries_tsv_rejects_bad_header(tmp_path):
    path = tmp_path / "queries.tsv"
    path.write_text("id\tquery\nq1\tx\n", encoding="utf-8")
    with pytest.raises(InputError):
        read_queries_tsv(path)
