"""Generation backends: echo, scripted_file, and a Hugging Face causal LM.

A backend produces raw reply text plus a finish reason for a generate
request; stop-sequence enforcement happens in the server on the decoded
text, so every backend gets identical stop semantics.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .protocol import Generate

BACKENDS = ("echo", "scripted_file", "hf")
STOP_MODES = ("truncate", "off")


@dataclass
class BackendConfig:
    backend: str
    script_path: str | None = None
    model_id: str | None = None
    device: str = "cpu"
    max_context_tokens: int = 4096
    stop_mode: str = "truncate"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.stop_mode not in STOP_MODES:
            raise ValueError(f"unknown stop mode {self.stop_mode!r}")
        if self.backend == "scripted_file" and not self.script_path:
            raise ValueError("scripted_file backend needs --script")
        if self.backend == "hf" and not self.model_id:
            raise ValueError("hf backend needs --model")


class EchoBackend:
    """Deterministic conformance target: the context's last line, reversed."""

    def respond(self, request: Generate) -> tuple[str, str]:
        last_line = request.context.split("\n")[-1]
        return last_line[::-1], "eos"


@dataclass
class _ScriptEntry:
    response: str
    trigger: str = "always_next"
    trigger_text: str | None = None
    finish_reason: str = "eos"

    def matches(self, context: str) -> bool:
        if self.trigger == "always_next":
            return True
        if self.trigger == "context_contains":
            return (self.trigger_text or "") in context
        raise ValueError(f"unknown trigger {self.trigger!r}")


class ScriptedFileBackend:
    """Plays back a script in the shared mock-script JSON schema.

    Entries fire in order, each at most once; a context_contains entry whose
    text is absent stays available for later requests.  An exhausted script
    yields an empty eos reply.
    """

    def __init__(self, path: str | Path):
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(payload, dict) or not isinstance(payload.get("entries"), list):
            raise ValueError(f"{path}: script must be an object with an entries list")
        self._entries = []
        for raw in payload["entries"]:
            if not isinstance(raw, dict) or "response" not in raw:
                raise ValueError(f"{path}: each entry needs a response field")
            self._entries.append(_ScriptEntry(
                response=raw["response"],
                trigger=raw.get("trigger", "always_next"),
                trigger_text=raw.get("trigger_text"),
                finish_reason=raw.get("finish_reason", "eos")))
        self._consumed = [False] * len(self._entries)

    def respond(self, request: Generate) -> tuple[str, str]:
        for i, entry in enumerate(self._entries):
            if self._consumed[i]:
                continue
            if entry.matches(request.context):
                self._consumed[i] = True
                return entry.response, entry.finish_reason
        return "", "eos"


class HfBackend:
    """Greedy decoding with a Hugging Face causal language model.

    The prompt is truncated to the last ``max_context_tokens`` tokens; the
    reply is decoded text only (the prompt is stripped).  Token-budget
    exhaustion reports finish_reason ``length``, an end-of-sequence token
    ``eos``; stop sequences are enforced downstream on the decoded text.
    """

    def __init__(self, model_id: str, device: str = "cpu",
                 max_context_tokens: int = 4096):
        try:
            import torch  # noqa: F401
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as exc:
            raise RuntimeError(f"hf backend needs transformers and torch: {exc}") from exc
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_id)
            self._model = AutoModelForCausalLM.from_pretrained(model_id).to(device)
        except Exception as exc:
            raise RuntimeError(f"cannot load model {model_id!r}: {exc}") from exc
        self._model.eval()
        self._device = device
        self._max_context_tokens = max_context_tokens

    def respond(self, request: Generate) -> tuple[str, str]:
        import torch

        input_ids = self._tokenizer(request.context, return_tensors="pt").input_ids
        input_ids = input_ids[:, -self._max_context_tokens:].to(self._device)
        with torch.no_grad():
            output = self._model.generate(
                input_ids, max_new_tokens=request.max_tokens, do_sample=False,
                pad_token_id=self._tokenizer.eos_token_id)
        generated = output[0][input_ids.shape[1]:]
        text = self._tokenizer.decode(generated, skip_special_tokens=True)
        hit_eos = (self._tokenizer.eos_token_id is not None
                   and self._tokenizer.eos_token_id in generated.tolist())
        return text, ("eos" if hit_eos else "length")


def load_backend(config: BackendConfig):
    if config.backend == "echo":
        return EchoBackend()
    if config.backend == "scripted_file":
        return ScriptedFileBackend(config.script_path)
    return HfBackend(config.model_id, device=config.device,
                     max_context_tokens=config.max_context_tokens)
