"""Agentic repair loop: one design task in, an accepted artifact or exhaustion out.

An attempt is a fresh conversation (system prompt + task description). Within
an attempt the model may call tools each turn; an execute_and_validate result
that clears every gate ends the task as accepted. Attempts are capped, turns
per attempt are capped, and nothing carries over between attempts except the
attempt counter.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable

import jsonschema

from .catalog import PartDescription
from .docs import (
    DocCorpus,
    GrepPatternError,
    TfIdfIndex,
    grep_documentation,
    lookup_documentation,
)
from .llm import (
    ChatBackend,
    ChatMessage,
    PermanentLlmError,
    ReplayExhaustedError,
    ToolCallRequest,
    UsageCounters,
)
from .validation import GeometryGates, ValidationReport, Verdict, evaluate_report

logger = logging.getLogger(__name__)

TOOL_EXECUTE = "execute_and_validate"
TOOL_LOOKUP = "lookup_documentation"
TOOL_GREP = "grep_documentation"

DEFAULT_MAX_TURNS_PER_ATTEMPT = 10
DEFAULT_MAX_ATTEMPTS_PER_TASK = 100
DEFAULT_ATTEMPT_BUDGET_S = 15 * 60.0

EXECUTE_ARG_SCHEMA = {
    "type": "object",
    "properties": {"code": {"type": "string", "minLength": 1}},
    "required": ["code"],
    "additionalProperties": False,
}
LOOKUP_ARG_SCHEMA = {
    "type": "object",
    "properties": {
        "query": {"type": "string", "minLength": 1},
        "k": {"type": "integer", "minimum": 1},
    },
    "required": ["query"],
    "additionalProperties": False,
}
GREP_ARG_SCHEMA = {
    "type": "object",
    "properties": {
        "pattern": {"type": "string", "minLength": 1},
        "context": {"type": "integer", "minimum": 0},
    },
    "required": ["pattern"],
    "additionalProperties": False,
}


class RolloutError(Exception):
    """Raised for invalid rollout configuration."""


class TaskInfraError(Exception):
    """Infrastructure failure that should be retried at the task level.

    Carries a partial outcome so the coordinator can report an aborted task
    with honest counters if retries run out.
    """

    def __init__(self, cause: Exception, partial: "TaskOutcome") -> None:
        super().__init__(str(cause))
        self.cause = cause
        self.partial = partial


@dataclass(frozen=True)
class RolloutCaps:
    max_turns_per_attempt: int = DEFAULT_MAX_TURNS_PER_ATTEMPT
    max_attempts_per_task: int = DEFAULT_MAX_ATTEMPTS_PER_TASK
    attempt_budget_s: float = DEFAULT_ATTEMPT_BUDGET_S

    def __post_init__(self) -> None:
        if self.max_turns_per_attempt < 1 or self.max_attempts_per_task < 1:
            raise RolloutError("caps must be positive")
        if self.attempt_budget_s <= 0:
            raise RolloutError("attempt budget must be positive")


@dataclass(frozen=True)
class DesignTask:
    task_id: str
    description: PartDescription
    codegen_prompt: str
    reference_snippet: str | None = None

    def __post_init__(self) -> None:
        if not self.task_id:
            raise RolloutError("task_id must be nonempty")
        if not self.description.text.strip():
            raise RolloutError("task description must be nonempty")
        if not self.codegen_prompt.strip():
            raise RolloutError("codegen prompt must be nonempty")


@dataclass(frozen=True)
class ToolLedgerEntry:
    tool: str
    args_digest: str
    result_digest: str


@dataclass
class RolloutState:
    """Per-attempt conversation state; a new attempt starts a fresh state."""

    attempt_index: int
    turn_index: int = 0
    transcript: list[ChatMessage] = field(default_factory=list)
    tool_ledger: list[ToolLedgerEntry] = field(default_factory=list)
    last_report: ValidationReport | None = None
    usage: UsageCounters = field(default_factory=lambda: UsageCounters(0, 0))


@dataclass(frozen=True)
class TaskOutcome:
    task_id: str
    status: str  # accepted | exhausted | aborted
    attempts_used: int
    total_turns: int
    tool_call_counts: dict[str, int]
    tokens: dict[str, int]
    artifact_id: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "status": self.status,
            "attempts_used": self.attempts_used,
            "total_turns": self.total_turns,
            "tool_call_counts": dict(sorted(self.tool_call_counts.items())),
            "tokens": dict(self.tokens),
            "artifact_id": self.artifact_id,
        }


# -- tool registry ----------------------------------------------------------------


@dataclass(frozen=True)
class _ToolSpec:
    name: str
    description: str
    parameters: dict[str, Any]
    handler: Callable[[dict[str, Any]], dict[str, Any]]


class ToolRegistry:
    """Named tools with JSON-schema argument validation.

    Handlers return JSON-serializable payloads; every failure mode becomes an
    error payload for the model rather than an exception for the pipeline.
    """

    def __init__(self) -> None:
        self._tools: dict[str, _ToolSpec] = {}

    def register(
        self,
        name: str,
        description: str,
        parameters: dict[str, Any],
        handler: Callable[[dict[str, Any]], dict[str, Any]],
    ) -> None:
        if name in self._tools:
            raise RolloutError(f"tool {name!r} already registered")
        self._tools[name] = _ToolSpec(name, description, parameters, handler)

    def names(self) -> list[str]:
        return list(self._tools)

    def schemas(self) -> list[dict[str, Any]]:
        return [
            {
                "type": "function",
                "function": {
                    "name": spec.name,
                    "description": spec.description,
                    "parameters": spec.parameters,
                },
            }
            for spec in self._tools.values()
        ]

    def handle(self, name: str, arguments: dict[str, Any]) -> dict[str, Any]:
        spec = self._tools.get(name)
        if spec is None:
            return {"error": f"unknown tool {name!r}"}
        try:
            jsonschema.validate(arguments, spec.parameters)
        except jsonschema.ValidationError as exc:
            return {"error": f"invalid arguments for {name}: {exc.message}"}
        try:
            return spec.handler(arguments)
        except GrepPatternError as exc:
            return {"error": str(exc)}
        except Exception as exc:  # noqa: BLE001 - tool failures must reach the model
            logger.warning("tool %s failed: %s", name, exc)
            return {"error": f"{name} failed: {exc}"}


def dispatch_tool_call(
    call: ToolCallRequest, registry: ToolRegistry
) -> tuple[str, dict[str, Any]]:
    """Route one tool call; returns (serialized text for the model, payload)."""
    try:
        arguments = call.parsed_arguments()
    except ValueError as exc:
        payload: dict[str, Any] = {"error": f"arguments are not a JSON object: {exc}"}
        return json.dumps(payload, sort_keys=True), payload
    payload = registry.handle(call.name, arguments)
    return json.dumps(payload, sort_keys=True), payload


def acceptance_gate(report: ValidationReport, gates: GeometryGates | None = None) -> Verdict:
    """Pass iff execution, geometry gates, exports, and the mesh recheck all clear."""
    return evaluate_report(report, gates or GeometryGates())


def build_tool_registry(
    executor: Callable[[str], ValidationReport],
    doc_index: TfIdfIndex,
    corpus: DocCorpus,
    gates: GeometryGates | None = None,
) -> ToolRegistry:
    """Standard three-tool registry used by every rollout."""
    gates = gates or GeometryGates()
    registry = ToolRegistry()

    def _execute(args: dict[str, Any]) -> dict[str, Any]:
        report = executor(args["code"])
        verdict = acceptance_gate(report, gates)
        return {"report": report.to_wire(), "verdict": verdict.to_payload()}

    def _lookup(args: dict[str, Any]) -> dict[str, Any]:
        result = lookup_documentation(doc_index, args["query"], k=args.get("k", 5))
        return result.to_payload()

    def _grep(args: dict[str, Any]) -> dict[str, Any]:
        result = grep_documentation(corpus, args["pattern"], context=args.get("context", 1))
        return result.to_payload()

    registry.register(
        TOOL_EXECUTE,
        "Execute CadQuery code that stores its solid in a variable named "
        "'result'; returns execution status, topology metrics, export "
        "results, and the acceptance verdict.",
        EXECUTE_ARG_SCHEMA,
        _execute,
    )
    registry.register(
        TOOL_LOOKUP,
        "Ranked documentation search; returns the best-matching doc snippets "
        "for a free-text query.",
        LOOKUP_ARG_SCHEMA,
        _lookup,
    )
    registry.register(
        TOOL_GREP,
        "Regex search over the documentation; returns matching lines with "
        "surrounding context.",
        GREP_ARG_SCHEMA,
        _grep,
    )
    return registry


# -- conversation helpers -----------------------------------------------------------


def build_task_messages(task: DesignTask) -> list[ChatMessage]:
    user_text = task.description.text
    if task.reference_snippet:
        user_text += (
            "\n\nReference snippet for this category:\n```python\n"
            + task.reference_snippet.strip()
            + "\n```"
        )
    return [
        ChatMessage(role="system", content=task.codegen_prompt),
        ChatMessage(role="user", content=user_text),
    ]


def validate_transcript(messages: list[ChatMessage]) -> None:
    """Raise if the transcript violates conversation well-formedness."""
    if not messages or messages[0].role != "system":
        raise RolloutError("transcript must begin with the system prompt")
    pending: list[str] = []
    for message in messages[1:]:
        if message.role == "assistant":
            if pending:
                raise RolloutError(f"unanswered tool calls before assistant turn: {pending}")
            pending = [call.id for call in (message.tool_calls or [])]
        elif message.role == "tool":
            if not pending or message.tool_call_id != pending[0]:
                raise RolloutError(f"tool reply {message.tool_call_id!r} out of order")
            pending.pop(0)
    if pending:
        raise RolloutError(f"transcript ends with unanswered tool calls: {pending}")


def _digest(value: Any) -> str:
    blob = json.dumps(value, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def default_artifact_id(task_id: str, code: str) -> str:
    return f"{task_id}-{hashlib.sha256(code.encode('utf-8')).hexdigest()[:12]}"


AcceptCallback = Callable[[DesignTask, str, ValidationReport, RolloutState], str]


def _no_persist_accept(
    task: DesignTask, code: str, report: ValidationReport, state: RolloutState
) -> str:
    return default_artifact_id(task.task_id, code)


# -- the loop -----------------------------------------------------------------------


def run_design_task(
    task: DesignTask,
    llm: ChatBackend,
    registry: ToolRegistry,
    caps: RolloutCaps | None = None,
    *,
    on_accept: AcceptCallback = _no_persist_accept,
    clock: Callable[[], float] = time.monotonic,
    sampling: dict[str, Any] | None = None,
) -> tuple[TaskOutcome, RolloutState]:
    """Drive the generate-execute-validate-repair loop for one task.

    Permanent LLM errors abort the attempt and count against the attempt cap.
    Transport-level failures raise TaskInfraError for the coordinator's task
    retry; they do not consume attempts.
    """
    caps = caps or RolloutCaps()
    required = {TOOL_EXECUTE, TOOL_LOOKUP, TOOL_GREP}
    missing = required - set(registry.names())
    if missing:
        raise RolloutError(f"registry is missing required tools: {sorted(missing)}")

    sampling = sampling or {}
    tool_counts: dict[str, int] = defaultdict(int)
    usage_total = UsageCounters(0, 0)
    total_turns = 0
    state = RolloutState(attempt_index=0)

    def _partial(status: str, attempts: int) -> TaskOutcome:
        return TaskOutcome(
            task_id=task.task_id,
            status=status,
            attempts_used=attempts,
            total_turns=total_turns,
            tool_call_counts=dict(tool_counts),
            tokens={"prompt": usage_total.prompt_tokens, "completion": usage_total.completion_tokens},
        )

    for attempt in range(1, caps.max_attempts_per_task + 1):
        state = RolloutState(attempt_index=attempt, transcript=build_task_messages(task))
        attempt_start = clock()
        accepted: tuple[str, ValidationReport] | None = None

        for turn in range(1, caps.max_turns_per_attempt + 1):
            if clock() - attempt_start >= caps.attempt_budget_s:
                logger.warning(
                    "task %s attempt %d hit the %.0fs budget at turn %d",
                    task.task_id, attempt, caps.attempt_budget_s, turn,
                )
                break
            try:
                message, usage = llm.complete(state.transcript, registry.schemas(), **sampling)
            except ReplayExhaustedError as exc:
                # a finished replay script can never produce more turns; this
                # is a fixture/infrastructure condition, not a model failure
                raise TaskInfraError(exc, _partial("aborted", attempt)) from exc
            except PermanentLlmError as exc:
                logger.warning("task %s attempt %d aborted by LLM error: %s", task.task_id, attempt, exc)
                break
            except Exception as exc:
                raise TaskInfraError(exc, _partial("aborted", attempt)) from exc

            state.turn_index = turn
            total_turns += 1
            usage_total = usage_total + usage
            state.usage = state.usage + usage
            state.transcript.append(message)

            for call in message.tool_calls or []:
                text, payload = dispatch_tool_call(call, registry)
                tool_counts[call.name] += 1
                state.tool_ledger.append(
                    ToolLedgerEntry(call.name, _digest(call.arguments), _digest(text))
                )
                state.transcript.append(
                    ChatMessage(role="tool", content=text, tool_call_id=call.id)
                )
                if call.name == TOOL_EXECUTE and "report" in payload:
                    state.last_report = ValidationReport.from_wire(payload["report"])
                    if payload.get("verdict", {}).get("accepted") and accepted is None:
                        accepted = (call.parsed_arguments()["code"], state.last_report)

            if accepted is not None:
                artifact_id = on_accept(task, accepted[0], accepted[1], state)
                return (
                    TaskOutcome(
                        task_id=task.task_id,
                        status="accepted",
                        attempts_used=attempt,
                        total_turns=total_turns,
                        tool_call_counts=dict(tool_counts),
                        tokens={
                            "prompt": usage_total.prompt_tokens,
                            "completion": usage_total.completion_tokens,
                        },
                        artifact_id=artifact_id,
                    ),
                    state,
                )

    return _partial("exhausted", caps.max_attempts_per_task), state
