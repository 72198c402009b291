"""Chat-completion client for OpenAI-compatible endpoints, plus a deterministic replay backend.

The HTTP backend speaks the chat-completions tool-calling wire shape only
(no legacy ``function_call`` field). The replay backend mirrors the same
shape from a JSON-lines script so the whole pipeline can run offline.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

import requests

logger = logging.getLogger(__name__)

VALID_ROLES = ("system", "user", "assistant", "tool")

DEFAULT_TEMPERATURE = 1.0
DEFAULT_MAX_TOKENS = 4096


class LlmError(Exception):
    """Base class for chat client failures."""


class PermanentLlmError(LlmError):
    """Non-retryable failure: 4xx, malformed response body, bad request."""

    def __init__(self, message: str, raw_body: str | None = None) -> None:
        super().__init__(message)
        self.raw_body = raw_body


class RetryableLlmError(LlmError):
    """Transient failure (transport error or 5xx) that survived all retries."""


class ReplayScriptError(LlmError):
    """A replay script file could not be loaded."""


class ReplayExhaustedError(PermanentLlmError):
    """The replay script ran out of turns; signals a test/fixture mismatch."""


@dataclass(frozen=True)
class ToolCallRequest:
    """One function call requested by the assistant."""

    id: str
    name: str
    arguments: str

    def parsed_arguments(self) -> dict[str, Any]:
        parsed = json.loads(self.arguments)
        if not isinstance(parsed, dict):
            raise ValueError(f"tool call arguments must be a JSON object, got {type(parsed).__name__}")
        return parsed


@dataclass
class UsageCounters:
    """Prompt/completion token counts for one call or an aggregated conversation."""

    prompt_tokens: int = 0
    completion_tokens: int = 0
    missing: bool = False

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")

    def __add__(self, other: "UsageCounters") -> "UsageCounters":
        return UsageCounters(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
            missing=self.missing or other.missing,
        )


@dataclass
class ChatMessage:
    """One turn of a conversation in the chat-completions shape.

    ``reasoning`` holds any thinking text the endpoint returned. It is kept
    for transcripts and stats but deliberately dropped by :meth:`to_wire`,
    since endpoints vary in whether they accept it back.
    """

    role: str
    content: str = ""
    tool_calls: list[ToolCallRequest] | None = None
    tool_call_id: str | None = None
    reasoning: str | None = None

    def __post_init__(self) -> None:
        if self.role not in VALID_ROLES:
            raise ValueError(f"invalid role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages require tool_call_id")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("tool_calls are only valid on assistant messages")
        if self.tool_calls is not None:
            ids = [c.id for c in self.tool_calls]
            if len(ids) != len(set(ids)):
                raise ValueError("tool call ids must be unique within a message")

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            wire["tool_calls"] = [
                {"id": c.id, "type": "function", "function": {"name": c.name, "arguments": c.arguments}}
                for c in self.tool_calls
            ]
        if self.tool_call_id is not None:
            wire["tool_call_id"] = self.tool_call_id
        return wire

    def to_log_dict(self) -> dict[str, Any]:
        record = self.to_wire()
        if self.reasoning is not None:
            record["reasoning"] = self.reasoning
        return record

    @classmethod
    def from_wire(cls, wire: dict[str, Any]) -> "ChatMessage":
        calls = None
        if wire.get("tool_calls"):
            calls = [
                ToolCallRequest(
                    id=str(c["id"]),
                    name=str(c["function"]["name"]),
                    arguments=str(c["function"]["arguments"]),
                )
                for c in wire["tool_calls"]
            ]
        return cls(
            role=wire["role"],
            content=wire.get("content") or "",
            tool_calls=calls,
            tool_call_id=wire.get("tool_call_id"),
            reasoning=wire.get("reasoning") or wire.get("reasoning_content"),
        )


@dataclass(frozen=True)
class EndpointConfig:
    """One OpenAI-compatible endpoint. ``auth_token_env`` names an env var, never a secret."""

    url: str
    model: str
    auth_token_env: str | None = None

    @property
    def is_replay(self) -> bool:
        return self.url.startswith("replay:")


class ChatBackend(Protocol):
    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None = None,
        **sampling: Any,
    ) -> tuple[ChatMessage, UsageCounters]: ...


def _validate_request(messages: list[ChatMessage]) -> None:
    if not messages:
        raise ValueError("messages must be nonempty")
    if messages[0].role != "system":
        raise ValueError("first message must have role=system")


class HttpChatBackend:
    """Immutable client for one endpoint; safe to share across rollouts.

    5xx and transport errors retry with bounded exponential backoff
    (``max_tries`` total attempts); 4xx and unparsable bodies are permanent.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        *,
        timeout_s: float = 120.0,
        max_tries: int = 3,
        backoff_base_s: float = 0.5,
        temperature: float = DEFAULT_TEMPERATURE,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._endpoint = endpoint
        self._timeout_s = timeout_s
        self._max_tries = max_tries
        self._backoff_base_s = backoff_base_s
        self._temperature = temperature
        self._max_tokens = max_tokens
        self._session = session or requests.Session()
        self._sleep = sleep

    @property
    def endpoint(self) -> EndpointConfig:
        return self._endpoint

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None = None,
        **sampling: Any,
    ) -> tuple[ChatMessage, UsageCounters]:
        _validate_request(messages)
        payload: dict[str, Any] = {
            "model": self._endpoint.model,
            "messages": [m.to_wire() for m in messages],
            "temperature": sampling.get("temperature", self._temperature),
            "max_tokens": sampling.get("max_tokens", self._max_tokens),
        }
        if tool_schemas:
            payload["tools"] = tool_schemas
            payload["tool_choice"] = "auto"
        headers = {"Content-Type": "application/json"}
        if self._endpoint.auth_token_env:
            token = os.environ.get(self._endpoint.auth_token_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"

        url = self._endpoint.url.rstrip("/") + "/v1/chat/completions"
        last_err: str = ""
        for attempt in range(self._max_tries):
            try:
                resp = self._session.post(url, json=payload, headers=headers, timeout=self._timeout_s)
            except requests.RequestException as exc:
                last_err = f"transport error: {exc}"
            else:
                if resp.status_code >= 500:
                    last_err = f"server error {resp.status_code}"
                elif resp.status_code >= 400:
                    raise PermanentLlmError(
                        f"endpoint rejected request with {resp.status_code}", raw_body=resp.text
                    )
                else:
                    if attempt:
                        logger.info("chat_complete recovered after %d retries", attempt)
                    return self._parse_response(resp.text)
            if attempt + 1 < self._max_tries:
                self._sleep(self._backoff_base_s * (2**attempt))
        raise RetryableLlmError(f"endpoint failed after {self._max_tries} tries: {last_err}")

    def _parse_response(self, body: str) -> tuple[ChatMessage, UsageCounters]:
        try:
            data = json.loads(body)
            message_wire = data["choices"][0]["message"]
            message = ChatMessage.from_wire(message_wire)
        except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise PermanentLlmError(f"malformed completion body: {exc}", raw_body=body) from exc
        usage_raw = data.get("usage")
        if usage_raw:
            usage = UsageCounters(
                prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
                completion_tokens=int(usage_raw.get("completion_tokens", 0)),
            )
        else:
            logger.warning("endpoint omitted usage counters; recording zeros")
            usage = UsageCounters(missing=True)
        return message, usage


class ReplayBackend:
    """Yields scripted assistant turns in order; exhaustion is an error.

    Each script line is ``{content?, tool_calls?: [{name, arguments}], usage?}``.
    With ``loop=True`` the script repeats forever, which is how fixtures model
    an endpoint that keeps producing failing code.
    """

    def __init__(self, turns: list[dict[str, Any]], *, loop: bool = False, source: str = "<memory>") -> None:
        self._turns = turns
        self._loop = loop
        self._source = source
        self._index = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._turns)

    def complete(
        self,
        messages: list[ChatMessage],
        tool_schemas: list[dict[str, Any]] | None = None,
        **sampling: Any,
    ) -> tuple[ChatMessage, UsageCounters]:
        _validate_request(messages)
        with self._lock:
            if self._index >= len(self._turns):
                if not self._loop or not self._turns:
                    raise ReplayExhaustedError(
                        f"replay script exhausted after {len(self._turns)} turns ({self._source})"
                    )
                self._index = 0
            turn = self._turns[self._index]
            call_base = self._index
            self._index += 1

        tool_calls = None
        if turn.get("tool_calls"):
            tool_calls = []
            for i, call in enumerate(turn["tool_calls"]):
                arguments = call["arguments"]
                if not isinstance(arguments, str):
                    arguments = json.dumps(arguments)
                tool_calls.append(
                    ToolCallRequest(id=f"call_{call_base}_{i}", name=call["name"], arguments=arguments)
                )
        message = ChatMessage(
            role="assistant",
            content=turn.get("content") or "",
            tool_calls=tool_calls,
            reasoning=turn.get("reasoning"),
        )
        usage_raw = turn.get("usage") or {}
        usage = UsageCounters(
            prompt_tokens=int(usage_raw.get("prompt_tokens", 0)),
            completion_tokens=int(usage_raw.get("completion_tokens", 0)),
        )
        return message, usage


def load_replay_script(path: str | Path, *, loop: bool = False) -> ReplayBackend:
    """Load a JSON-lines replay script, one scripted assistant turn per line."""
    path = Path(path)
    turns: list[dict[str, Any]] = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                turn = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReplayScriptError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
            if not isinstance(turn, dict):
                raise ReplayScriptError(f"{path}:{lineno}: each line must be a JSON object")
            turns.append(turn)
    return ReplayBackend(turns, loop=loop, source=str(path))
