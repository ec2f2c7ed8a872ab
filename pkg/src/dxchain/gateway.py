"""LLM access layer: remote chat-completions backend, scripted replay, and
schema-validated structured output with a bounded repair loop.

Every model call is addressed by (node_tag, turn_index).  The pair is unique
within a session, which is what makes scripted replay and trace digests work.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import requests

from .errors import SchemaViolationError, ScriptedMissError, TransportError

logger = logging.getLogger(__name__)

API_KEY_ENV = "DXCHAIN_API_KEY"

# HTTP statuses worth retrying; everything else 4xx fails immediately.
_RETRYABLE = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ChatRequest:
    node_tag: str
    turn_index: int
    messages: tuple[ChatMessage, ...]
    # Prompt-template version label; recorded in traces, excluded from the digest.
    template_id: str = ""


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str
    model_id: str
    temperature: float = 0.1
    max_inflight: int = 4
    retry_limit: int = 3
    backoff_base: float = 0.5
    timeout: float = 120.0


def fingerprint(request: ChatRequest) -> str:
    """Stable digest of the request identity: node_tag, turn_index, messages."""
    payload = {
        "node_tag": request.node_tag,
        "turn_index": request.turn_index,
        "messages": [m.to_dict() for m in request.messages],
    }
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class LLMBackend(Protocol):
    def send(self, request: ChatRequest) -> ChatResponse: ...


class RemoteBackend:
    """OpenAI-style chat-completions endpoint with bearer auth and backoff.

    ``transport`` and ``sleeper`` are injectable for tests; the default
    transport posts with requests.  A bounded semaphore caps concurrent
    sends at config.max_inflight across all threads sharing this backend.
    """

    def __init__(
        self,
        config: GatewayConfig,
        transport: Callable[[str, dict, dict, float], tuple[int, str]] | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._transport = transport or self._post
        self._sleeper = sleeper
        self._gate = threading.BoundedSemaphore(config.max_inflight)

    @staticmethod
    def _post(url: str, headers: dict, payload: dict, timeout: float) -> tuple[int, str]:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
        return resp.status_code, resp.text

    def send(self, request: ChatRequest) -> ChatResponse:
        api_key = os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.config.model_id,
            "temperature": self.config.temperature,
            "messages": [m.to_dict() for m in request.messages],
        }

        last_error = ""
        attempts = 0
        for attempt in range(self.config.retry_limit + 1):
            attempts = attempt + 1
            if attempt:
                self._sleeper(self.config.backoff_base * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    status, body = self._transport(
                        self.config.endpoint_url, headers, payload, self.config.timeout
                    )
            except requests.RequestException as exc:
                last_error = f"connection error: {exc}"
                logger.warning("%s (attempt %d)", last_error, attempts)
                continue
            if status in _RETRYABLE:
                last_error = f"HTTP {status}"
                logger.warning("%s from %s (attempt %d)", last_error, self.config.endpoint_url, attempts)
                continue
            if status != 200:
                raise TransportError(f"HTTP {status}: {body[:200]}", attempts=attempts)
            return self._parse_body(body, attempts)
        raise TransportError(last_error or "no attempts made", attempts=attempts)

    @staticmethod
    def _parse_body(body: str, attempts: int) -> ChatResponse:
        try:
            doc = json.loads(body)
            text = doc["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError):
            raise TransportError(f"malformed completion body: {body[:200]}", attempts=attempts)
        usage = doc.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


def _word_count(text: str) -> int:
    return len(text.split())


class ScriptedBackend:
    """Deterministic replay from a (node_tag, turn_index) -> text mapping.

    Token counts are whitespace word counts so replayed traces stay stable.
    """

    def __init__(self, fixture: dict[tuple[str, int], str]):
        self.fixture = dict(fixture)

    def send(self, request: ChatRequest) -> ChatResponse:
        key = (request.node_tag, request.turn_index)
        if key not in self.fixture:
            raise ScriptedMissError(request.node_tag, request.turn_index)
        text = self.fixture[key]
        prompt_tokens = sum(_word_count(m.content) for m in request.messages)
        return ChatResponse(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=_word_count(text),
        )


def load_fixture(path: str | Path) -> dict[tuple[str, int], str]:
    """Read a single-session fixture: JSONL of {node_tag, turn_index, response}.

    Keys must be unique; a duplicate means the fixture was corrupted.
    """
    fixture: dict[tuple[str, int], str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = json.loads(line)
            key = (entry["node_tag"], int(entry["turn_index"]))
            if key in fixture:
                raise ValueError(f"{path}:{line_no}: duplicate fixture key {key}")
            fixture[key] = entry["response"]
    return fixture


def load_batch_fixture(path: str | Path) -> dict[str, dict[tuple[str, int], str]]:
    """Read a multi-case fixture: JSONL of {case_id, node_tag, turn_index, response}."""
    fixtures: dict[str, dict[tuple[str, int], str]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entry = json.loads(line)
            case_id = entry["case_id"]
            key = (entry["node_tag"], int(entry["turn_index"]))
            per_case = fixtures.setdefault(case_id, {})
            if key in per_case:
                raise ValueError(f"{path}:{line_no}: duplicate fixture key {case_id}/{key}")
            per_case[key] = entry["response"]
    return fixtures


def save_fixture(fixture: dict[tuple[str, int], str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for (node_tag, turn_index), response in sorted(fixture.items()):
            fh.write(json.dumps(
                {"node_tag": node_tag, "turn_index": turn_index, "response": response},
                ensure_ascii=False,
            ) + "\n")


@dataclass(frozen=True)
class FieldSpec:
    """One checked field of a structured output.

    path uses dots for nesting ("final_diagnosis_update.primary_diagnoses").
    kind is one of string, number, boolean, list, object, enum.
    """

    path: str
    kind: str
    choices: tuple[str, ...] = ()
    required: bool = True
    item_kind: str | None = None
    nonempty: bool = False


_MISSING = object()


def _resolve(obj: dict, path: str) -> object:
    node: object = obj
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return _MISSING
        node = node[part]
    return node


def _kind_ok(value: object, kind: str) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "list":
        return isinstance(value, list)
    if kind == "object":
        return isinstance(value, dict)
    raise ValueError(f"unknown field kind: {kind}")


@dataclass(frozen=True)
class OutputSchema:
    schema_id: str
    fields: tuple[FieldSpec, ...] = ()

    def validate(self, obj: object) -> list[str]:
        if not isinstance(obj, dict):
            return [f"expected a JSON object, got {type(obj).__name__}"]
        violations: list[str] = []
        for spec in self.fields:
            value = _resolve(obj, spec.path)
            if value is _MISSING:
                if spec.required:
                    violations.append(f"missing field: {spec.path}")
                continue
            if spec.kind == "enum":
                if value not in spec.choices:
                    violations.append(
                        f"{spec.path}: must be one of {list(spec.choices)}, got {value!r}"
                    )
                continue
            if not _kind_ok(value, spec.kind):
                violations.append(f"{spec.path}: expected {spec.kind}")
                continue
            if spec.kind == "string" and spec.nonempty and not value.strip():
                violations.append(f"{spec.path}: must not be empty")
            if spec.kind == "list":
                if spec.nonempty and not value:
                    violations.append(f"{spec.path}: must not be empty")
                if spec.item_kind:
                    for i, item in enumerate(value):
                        if not _kind_ok(item, spec.item_kind):
                            violations.append(f"{spec.path}[{i}]: expected {spec.item_kind}")
        return violations


def extract_json_object(text: str) -> dict:
    """Return the first balanced JSON object embedded in text.

    Tolerates surrounding prose and markdown fences.  Raises ValueError when
    no parseable object exists.
    """
    start = text.find("{")
    last_error = "no opening brace found"
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    candidate = text[start : i + 1]
                    try:
                        obj = json.loads(candidate)
                    except json.JSONDecodeError as exc:
                        last_error = exc.msg
                        break
                    if isinstance(obj, dict):
                        return obj
                    last_error = "top-level JSON value is not an object"
                    break
        else:
            last_error = "unbalanced braces"
        start = text.find("{", start + 1)
    raise ValueError(last_error)


def _repair_message(violations: list[str]) -> str:
    lines = "\n".join(f"- {v}" for v in violations)
    return (
        "Your previous reply did not satisfy the required output format:\n"
        f"{lines}\n"
        "Reply again with a single corrected JSON object and nothing else."
    )


class Gateway:
    """Front door for model calls.

    recorder, when set, receives one event dict per send (including repair
    re-sends) for the session trace.
    """

    def __init__(self, backend: LLMBackend, recorder: Callable[[dict], None] | None = None):
        self.backend = backend
        self._recorder = recorder

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.backend.send(request)
        if self._recorder is not None:
            self._recorder({
                "kind": "gateway",
                "node_tag": request.node_tag,
                "turn_index": request.turn_index,
                "template_id": request.template_id,
                "digest": fingerprint(request),
                "request_messages": [m.to_dict() for m in request.messages],
                "response_text": response.text,
                "tokens": {
                    "prompt": response.prompt_tokens,
                    "completion": response.completion_tokens,
                },
            })
        return response

    def complete_structured(
        self,
        request: ChatRequest,
        schema: OutputSchema,
        max_repairs: int = 2,
        validate_extra: Callable[[dict], list[str]] | None = None,
    ) -> dict:
        """Send, parse the first JSON object, validate, repair up to max_repairs."""
        current = request
        violations: list[str] = []
        for _ in range(max_repairs + 1):
            response = self.complete(current)
            try:
                obj = extract_json_object(response.text)
            except ValueError as exc:
                violations = [f"no JSON object found: {exc}"]
            else:
                violations = schema.validate(obj)
                if not violations and validate_extra is not None:
                    violations = validate_extra(obj)
                if not violations:
                    return obj
            current = ChatRequest(
                node_tag=request.node_tag,
                turn_index=request.turn_index,
                messages=current.messages + (
                    ChatMessage("assistant", response.text),
                    ChatMessage("user", _repair_message(violations)),
                ),
                template_id=request.template_id,
            )
        raise SchemaViolationError(schema.schema_id, violations)
