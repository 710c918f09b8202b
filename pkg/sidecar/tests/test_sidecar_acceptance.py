"""Secondary acceptance: protocol conformance and golden-run equivalence.

The sidecar must pass the primary component's protocol test vectors byte for
byte, and a full batch of agentic runs driven through its scripted_file
backend must reproduce the exact golden store the in-process mock generator
produces.  The sidecar itself never imports the primary package; the primary
toolkit only appears here as the test driver.
"""
from __future__ import annotations

import subprocess
import time

from sidecar_helpers import PRIMARY_TESTS, sidecar_argv, sidecar_env
from model_sidecar.protocol import WireError, decode, encode

GOLDEN_STORE = PRIMARY_TESTS / "fixtures" / "golden" / "expected_store"


def report(name: str) -> None:
    print(f"ACCEPTANCE PASS: {name}")


def test_protocol_vectors_byte_for_byte(shared_fixtures):
    valid = (shared_fixtures / "messages.jsonl").read_text(encoding="utf-8").splitlines()
    for line in valid:
        assert encode(decode(line)) == line
    invalid = (shared_fixtures / "invalid_messages.jsonl").read_text(
        encoding="utf-8").splitlines()
    for line in invalid:
        try:
            decode(line)
        except WireError:
            continue
        raise AssertionError(f"accepted invalid message: {line!r}")
    report(f"sidecar protocol vectors ({len(valid)} valid, {len(invalid)} invalid)")


def test_echo_session_transcript_byte_for_byte(shared_fixtures):
    base = shared_fixtures / "echo_session"
    proc = subprocess.run(
        sidecar_argv("--backend", "echo", "--transport", "stdio"),
        input=(base / "input.jsonl").read_text(encoding="utf-8"),
        capture_output=True, text=True, timeout=60, env=sidecar_env())
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout == (base / "expected.jsonl").read_text(encoding="utf-8")
    report("sidecar echo transcript byte-for-byte")


def test_golden_store_reproduced_through_sidecar(tmp_path):
    """Driving all 50 scripted runs through sidecar subprocesses yields a
    store byte-identical to the one the in-process mock generator makes."""
    import sys

    sys.path.insert(0, str(PRIMARY_TESTS))
    from golden_runs import run_golden_batch, write_input_files
    from searchtrace.protocol import SubprocessGenerator

    started = time.perf_counter()
    inputs = write_input_files(tmp_path / "inputs")
    scripts_dir = inputs["scripts"]

    def factory(qid: str) -> SubprocessGenerator:
        return SubprocessGenerator(
            sidecar_argv("--backend", "scripted_file", "--script",
                         str(scripts_dir / f"{qid}.json"), "--transport", "stdio"),
            timeout=60.0, env=sidecar_env())

    store_root = tmp_path / "store"
    summary = run_golden_batch(store_root, generator_factory=factory)
    assert summary == {"answered": 46, "parse_error": 2, "iteration_cap": 1,
                       "generator_error": 1}

    expected_files = sorted(p.relative_to(GOLDEN_STORE).as_posix()
                            for p in GOLDEN_STORE.rglob("*") if p.is_file())
    produced_files = sorted(p.relative_to(store_root).as_posix()
                            for p in store_root.rglob("*") if p.is_file())
    assert produced_files == expected_files
    for relative in expected_files:
        assert (store_root / relative).read_bytes() \
            == (GOLDEN_STORE / relative).read_bytes(), relative
    elapsed = time.perf_counter() - started
    report(f"sidecar golden-run equivalence (50 runs, {elapsed:.1f}s)")


def test_arun_through_tcp_sidecar_matches_mock(tmp_path):
    """One full run over the TCP transport equals the in-process mock run."""
    import socket
    import sys

    sys.path.insert(0, str(PRIMARY_TESTS))
    from golden_runs import golden_profile, golden_retriever, golden_scripts
    from searchtrace.orchestrator import run_arun
    from searchtrace.protocol import MockGenerator, TcpGenerator

    qid = "q041"
    script = golden_scripts()[qid]
    script_path = tmp_path / "script.json"
    script.save(script_path)

    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    server = subprocess.Popen(
        sidecar_argv("--backend", "scripted_file", "--script", str(script_path),
                     "--transport", f"tcp:{port}"),
        stderr=subprocess.PIPE, text=True, env=sidecar_env())
    try:
        deadline = time.time() + 20
        while time.time() < deadline:
            try:
                socket.create_connection(("127.0.0.1", port), timeout=1).close()
                break
            except OSError:
                time.sleep(0.05)
        question = "how many people live in the capital of france"
        reference = run_arun(question, qid, MockGenerator(golden_scripts()[qid]),
                             golden_retriever(), golden_profile())
        client = TcpGenerator("127.0.0.1", port, timeout=30.0)
        try:
            outcome = run_arun(question, qid, client, golden_retriever(),
                               golden_profile())
        finally:
            client.close()
        assert outcome.trace == reference.trace
        assert outcome.trace.status.value == "answered"
        assert outcome.trace.length == 2
    finally:
        server.terminate()
        server.wait(timeout=10)
    report("arun over tcp sidecar equals in-process mock run")
