from __future__ import annotations

import json
import socket
import subprocess
import time

import pytest

from sidecar_helpers import sidecar_argv, sidecar_env
from model_sidecar.backends import BackendConfig, EchoBackend, ScriptedFileBackend
from model_sidecar.protocol import Generate, decode, encode
from model_sidecar.server import handle_line


def echo_config():
    return BackendConfig(backend="echo")


def request(context, request_id="r1", stops=("</search>",)):
    return Generate(request_id=request_id, context=context,
                    stop_sequences=list(stops), max_tokens=64)


# -- backends ---------------------------------------------------------------------

def test_echo_backend_reverses_last_line():
    text, finish_reason = EchoBackend().respond(request("hello\nabc"))
    assert text == "cba"
    assert finish_reason == "eos"


def test_scripted_backend_consumes_in_order(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps({"entries": [
        {"response": "late", "trigger": "context_contains", "trigger_text": "info"},
        {"response": "first"},
    ]}), encoding="utf-8")
    backend = ScriptedFileBackend(path)
    assert backend.respond(request("bare"))[0] == "first"
    assert backend.respond(request("with info now"))[0] == "late"
    assert backend.respond(request("with info now"))[0] == ""  # exhausted


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(backend="nope")
    with pytest.raises(ValueError):
        BackendConfig(backend="scripted_file")
    with pytest.raises(ValueError):
        BackendConfig(backend="hf")
    with pytest.raises(ValueError):
        BackendConfig(backend="echo", stop_mode="maybe")


# -- handle_line -------------------------------------------------------------------

def test_handle_line_hello_handshake():
    replies = handle_line('{"type":"hello","version":1}', EchoBackend(), echo_config())
    assert replies == ['{"type":"hello","version":1}']


def test_handle_line_wrong_version_is_error_done():
    replies = handle_line('{"type":"hello","version":2}', EchoBackend(), echo_config())
    assert json.loads(replies[0])["finish_reason"] == "error"


def test_handle_line_generate_chunks_and_done():
    req = request("line one\nabcdefghij")
    replies = [decode(r) for r in handle_line(encode(req), EchoBackend(), echo_config())]
    texts = [m.text for m in replies[:-1]]
    assert "".join(texts) == "jihgfedcba"
    assert all(len(t) <= 8 for t in texts)
    done = replies[-1]
    assert done.finish_reason == "eos"
    assert done.matched_stop is None


def test_handle_line_stop_enforced_on_decoded_text():
    req = request("X>hcraes/<overrun tail")
    replies = [decode(r) for r in handle_line(encode(req), EchoBackend(), echo_config())]
    text = "".join(m.text for m in replies[:-1])
    # reversed context is "liat nurrevo</search>X"; the trailing X is discarded
    assert text == "liat nurrevo</search>"
    done = replies[-1]
    assert done.finish_reason == "stop"
    assert done.matched_stop == "</search>"
    assert text.count("</search>") == 1


def test_handle_line_stop_mode_off_passes_through():
    config = BackendConfig(backend="echo", stop_mode="off")
    req = request("X>hcraes/<Y")
    replies = [decode(r) for r in handle_line(encode(req), EchoBackend(), config)]
    assert "".join(m.text for m in replies[:-1]) == "Y</search>X"
    assert replies[-1].finish_reason == "eos"


def test_handle_line_malformed_input_is_error_done():
    replies = handle_line("not json", EchoBackend(), echo_config())
    payload = json.loads(replies[0])
    assert payload["type"] == "done"
    assert payload["finish_reason"] == "error"


def test_handle_line_blank_line_ignored():
    assert handle_line("   ", EchoBackend(), echo_config()) == []


# -- stdio transport ----------------------------------------------------------------

def run_stdio_session(args, input_text, timeout=30):
    proc = subprocess.run(sidecar_argv(*args), input=input_text,
                          capture_output=True, text=True, timeout=timeout,
                          env=sidecar_env())
    return proc


def test_stdio_echo_session_matches_fixture(shared_fixtures):
    base = shared_fixtures / "echo_session"
    proc = run_stdio_session(["--backend", "echo", "--transport", "stdio"],
                             (base / "input.jsonl").read_text(encoding="utf-8"))
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout == (base / "expected.jsonl").read_text(encoding="utf-8")


def test_stdio_scripted_session_matches_fixture(shared_fixtures):
    base = shared_fixtures / "scripted_stop"
    hello = '{"type":"hello","version":1}\n'
    input_text = hello + (base / "requests.jsonl").read_text(encoding="utf-8")
    proc = run_stdio_session(["--backend", "scripted_file", "--script",
                              str(base / "script.json"), "--transport", "stdio"],
                             input_text)
    assert proc.returncode == 0, proc.stderr
    expected = hello + (base / "expected_reply.jsonl").read_text(encoding="utf-8")
    assert proc.stdout == expected


def test_stdio_missing_script_fails_nonzero():
    proc = run_stdio_session(["--backend", "scripted_file", "--script",
                              "/nonexistent/script.json", "--transport", "stdio"], "")
    assert proc.returncode != 0
    assert proc.stderr


# -- tcp transport ------------------------------------------------------------------

def test_tcp_transport_echo():
    port = _free_port()
    proc = subprocess.Popen(sidecar_argv("--backend", "echo", "--transport",
                                         f"tcp:{port}"),
                            stderr=subprocess.PIPE, text=True, env=sidecar_env())
    try:
        _wait_for_port(port)
        with socket.create_connection(("127.0.0.1", port), timeout=10) as sock:
            stream = sock.makefile("rw", encoding="utf-8", newline="\n")
            stream.write('{"type":"hello","version":1}\n')
            stream.write(encode(request("one\ntwo")) + "\n")
            stream.flush()
            assert json.loads(stream.readline())["type"] == "hello"
            texts = []
            while True:
                message = decode(stream.readline().rstrip("\n"))
                if message.__class__.__name__ == "Done":
                    assert message.finish_reason == "eos"
                    break
                texts.append(message.text)
            assert "".join(texts) == "owt"
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _wait_for_port(port, timeout=20):
    deadline = time.time() + timeout
    while time.time() < deadline:
        try:
            with socket.create_connection(("127.0.0.1", port), timeout=1):
                return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"sidecar never opened port {port}")
