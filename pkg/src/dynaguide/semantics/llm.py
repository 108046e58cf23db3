"""Pluggable LLM clients for graph extraction, plus a disk response cache.

The real network client is optional: with no endpoint configured the
package runs entirely on the rule parser and the replay stub. Responses
are cached keyed by (instruction template hash, prompt) so any run that
touched a live endpoint is replayable offline afterwards.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import requests

from ..errors import GraphExtractionError
from ..grammar import Grammar, load_grammar
from .graph import SemanticGraph, extract_graph_rules, graph_from_payload

INSTRUCTION_ASSET = "graph_instruction_v1.txt"

ENV_ENDPOINT = "DYNAGUIDE_LLM_ENDPOINT"
ENV_API_KEY = "DYNAGUIDE_LLM_API_KEY"
ENV_MODEL = "DYNAGUIDE_LLM_MODEL"


def load_instruction_template() -> str:
    return resources.files("dynaguide.assets").joinpath(INSTRUCTION_ASSET).read_text()


class LLMClient(Protocol):
    def send(self, instruction: str, prompt: str) -> str:
        """Return the raw text response for an instruction/prompt pair."""
        ...


class StubLLMClient:
    """Replays canned responses; unknown prompts raise like a dead endpoint."""

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)
        self.calls: list[str] = []

    def send(self, instruction: str, prompt: str) -> str:
        self.calls.append(prompt)
        if prompt not in self.responses:
            raise ConnectionError(f"stub has no canned response for {prompt!r}")
        return self.responses[prompt]


@dataclass
class HTTPLLMClient:
    """Minimal JSON-over-POST client: {"instruction", "prompt", "model"} -> {"text"}."""

    endpoint: str
    api_key: str | None = None
    model: str | None = None
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 1.5

    def send(self, instruction: str, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"instruction": instruction, "prompt": prompt}
        if self.model:
            body["model"] = self.model
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                return resp.json()["text"]
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_exc = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise ConnectionError(f"LLM endpoint failed after {self.retries + 1} tries: {last_exc}")


def client_from_env() -> HTTPLLMClient | None:
    endpoint = os.environ.get(ENV_ENDPOINT)
    if not endpoint:
        return None
    return HTTPLLMClient(
        endpoint=endpoint,
        api_key=os.environ.get(ENV_API_KEY),
        model=os.environ.get(ENV_MODEL),
    )


@dataclass
class ResponseCache:
    """Write-once disk cache with atomic replace, keyed by template+prompt."""

    root: Path
    template_hash: str = field(default="", repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _key(self, instruction: str, prompt: str) -> Path:
        digest = hashlib.sha256(
            instruction.encode() + b"\x00" + prompt.encode()
        ).hexdigest()
        return self.root / f"{digest}.json"

    def get(self, instruction: str, prompt: str) -> str | None:
        path = self._key(instruction, prompt)
        if not path.exists():
            return None
        return json.loads(path.read_text())["response"]

    def put(self, instruction: str, prompt: str, response: str) -> None:
        path = self._key(instruction, prompt)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"prompt": prompt, "response": response}))
        tmp.replace(path)


_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def parse_llm_response(raw: str, prompt: str) -> SemanticGraph:
    """Extract the JSON object from a raw response and validate it."""
    match = _JSON_RE.search(raw)
    if match is None:
        raise GraphExtractionError("no JSON object in LLM response")
    try:
        payload = json.loads(match.group(0))
    except json.JSONDecodeError as exc:
        raise GraphExtractionError(f"invalid JSON in LLM response: {exc}") from exc
    graph = graph_from_payload(payload, source="llm")
    graph.prompt = prompt  # trust the caller's prompt over the echo
    return graph


def extract_graph_llm(
    prompt: str,
    client: LLMClient,
    grammar: Grammar | None = None,
    cache: ResponseCache | None = None,
) -> SemanticGraph:
    """Graph via the LLM client; falls back to the rule parser on failure.

    Fallbacks are recorded as events on the returned graph so run records
    can surface them.
    """
    grammar = grammar or load_grammar()
    instruction = load_instruction_template()
    raw: str | None = None
    if cache is not None:
        raw = cache.get(instruction, prompt)
    if raw is None:
        try:
            raw = client.send(instruction, prompt)
        except Exception as exc:  # noqa: BLE001 - treat every client failure alike
            graph = extract_graph_rules(prompt, grammar)
            graph.source = "rules-fallback"
            graph.events.append(f"llm client failed ({exc}); used rule parser")
            return graph
        if cache is not None:
            cache.put(instruction, prompt, raw)
    try:
        return parse_llm_response(raw, prompt)
    except GraphExtractionError as exc:
        graph = extract_graph_rules(prompt, grammar)
        graph.source = "rules-fallback"
        graph.events.append(f"malformed llm response ({exc}); used rule parser")
        return graph
