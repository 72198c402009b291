"""Pipeline entry point: fans design tasks out to concurrent rollouts.

Owns the endpoint selector (round-robin with failure quarantine), the task
retry policy for infrastructure faults, and artifact commits. Every input
task yields exactly one outcome, streamed to the store as it completes.
"""
from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import docs as docsmod
from .catalog import PartDescription, load_taxonomy, read_catalog
from .execbridge import WorkerPool, run_code_via_worker
from .llm import ChatBackend, EndpointConfig, HttpChatBackend, RetryableLlmError, load_replay_script
from .rollout import (
    DesignTask,
    RolloutCaps,
    RolloutState,
    TaskInfraError,
    TaskOutcome,
    build_tool_registry,
    default_artifact_id,
    run_design_task,
)
from .store import Artifact, ArtifactStore, compute_generation_stats
from .validation import GeometryGates, ValidationReport

logger = logging.getLogger(__name__)

DEFAULT_MAX_TASK_RETRIES = 2
QUARANTINE_FAILURE_THRESHOLD = 3
QUARANTINE_COOLDOWN_S = 30.0


class ConfigError(Exception):
    """Raised when the pipeline configuration file is unusable."""


class NoEndpointAvailable(RetryableLlmError):
    """All endpoints are quarantined; retry after the cooldown."""


@dataclass(frozen=True)
class PipelineConfig:
    endpoints: list[EndpointConfig]
    task_source: str
    store_root: str
    codegen_prompt_path: str
    docs_dir: str | None = None
    catalog_prompt_path: str | None = None
    taxonomy_path: str | None = None
    worker_cmd: list[str] | None = None
    executor_timeout_s: float = 60.0
    max_concurrency: int = 1
    caps: RolloutCaps = field(default_factory=RolloutCaps)
    max_task_retries: int = DEFAULT_MAX_TASK_RETRIES
    replay_loop: bool = False
    fixed_timestamp: str | None = None

    def __post_init__(self) -> None:
        if not self.endpoints:
            raise ConfigError("at least one endpoint is required")
        if self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.executor_timeout_s <= 0:
            raise ConfigError("executor_timeout_s must be positive")
        if self.max_task_retries < 0:
            raise ConfigError("max_task_retries must be >= 0")

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        try:
            endpoints = [
                EndpointConfig(
                    url=ep["url"],
                    model=ep.get("model", ""),
                    auth_token_env=ep.get("auth_token_env"),
                )
                for ep in raw.get("endpoints", [])
            ]
            caps_raw = raw.get("caps", {})
            caps = RolloutCaps(
                max_turns_per_attempt=int(caps_raw.get("max_turns_per_attempt", 10)),
                max_attempts_per_task=int(caps_raw.get("max_attempts_per_task", 100)),
                attempt_budget_s=float(caps_raw.get("attempt_budget_s", 15 * 60.0)),
            )
            return cls(
                endpoints=endpoints,
                task_source=raw["task_source"],
                store_root=raw["store_root"],
                codegen_prompt_path=raw["codegen_prompt_path"],
                docs_dir=raw.get("docs_dir"),
                catalog_prompt_path=raw.get("catalog_prompt_path"),
                taxonomy_path=raw.get("taxonomy_path"),
                worker_cmd=raw.get("worker_cmd"),
                executor_timeout_s=float(raw.get("executor_timeout_s", 60.0)),
                max_concurrency=int(raw.get("max_concurrency", 1)),
                caps=caps,
                max_task_retries=int(raw.get("retry", {}).get("max_task_retries", DEFAULT_MAX_TASK_RETRIES)),
                replay_loop=bool(raw.get("replay_loop", False)),
                fixed_timestamp=raw.get("fixed_timestamp"),
            )
        except KeyError as exc:
            raise ConfigError(f"config {path} is missing required field {exc}") from exc


class EndpointSelector:
    """Round-robin over healthy endpoints with consecutive-failure quarantine."""

    def __init__(
        self,
        endpoints: list[EndpointConfig],
        *,
        failure_threshold: int = QUARANTINE_FAILURE_THRESHOLD,
        cooldown_s: float = QUARANTINE_COOLDOWN_S,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        if not endpoints:
            raise ConfigError("selector needs at least one endpoint")
        self._endpoints = list(endpoints)
        self._failure_threshold = failure_threshold
        self._cooldown_s = cooldown_s
        self._clock = clock
        self._lock = threading.Lock()
        self._cursor = 0
        self._consecutive_failures = [0] * len(endpoints)
        self._quarantined_until = [0.0] * len(endpoints)

    def _healthy(self, index: int, now: float) -> bool:
        until = self._quarantined_until[index]
        if until and now >= until:
            # cooldown elapsed: re-probe with a clean slate
            self._quarantined_until[index] = 0.0
            self._consecutive_failures[index] = 0
        return not self._quarantined_until[index]

    def next_endpoint(self) -> tuple[int, EndpointConfig]:
        with self._lock:
            now = self._clock()
            n = len(self._endpoints)
            for offset in range(n):
                index = (self._cursor + offset) % n
                if self._healthy(index, now):
                    self._cursor = (index + 1) % n
                    return index, self._endpoints[index]
            raise NoEndpointAvailable("all endpoints are quarantined")

    def report_success(self, index: int) -> None:
        with self._lock:
            self._consecutive_failures[index] = 0

    def report_failure(self, index: int) -> None:
        with self._lock:
            self._consecutive_failures[index] += 1
            if self._consecutive_failures[index] >= self._failure_threshold:
                self._quarantined_until[index] = self._clock() + self._cooldown_s
                logger.warning(
                    "endpoint %d quarantined for %.0fs after %d consecutive failures",
                    index, self._cooldown_s, self._consecutive_failures[index],
                )


@dataclass(frozen=True)
class PipelineSummary:
    n_tasks: int
    accepted: int
    exhausted: int
    aborted: int
    stats: dict[str, Any]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "n_tasks": self.n_tasks,
            "accepted": self.accepted,
            "exhausted": self.exhausted,
            "aborted": self.aborted,
            "stats": self.stats,
        }


ExecutorFactory = Callable[[str], Callable[[str], ValidationReport]]


def make_backend(
    endpoint: EndpointConfig, task_id: str, *, replay_loop: bool
) -> ChatBackend:
    if endpoint.is_replay:
        script_dir = Path(endpoint.url[len("replay:"):])
        script = script_dir / f"{task_id}.jsonl"
        if not script.is_file():
            script = script_dir / "default.jsonl"
        return load_replay_script(script, loop=replay_loop)
    return HttpChatBackend(endpoint)


def _default_executor_factory(config: PipelineConfig, store: ArtifactStore) -> ExecutorFactory:
    if not config.worker_cmd:
        raise ConfigError("config has no worker_cmd and no executor was injected")
    pool = WorkerPool(config.worker_cmd, size=config.max_concurrency)

    def factory(task_id: str) -> Callable[[str], ValidationReport]:
        counter = {"n": 0}

        def execute(code: str) -> ValidationReport:
            counter["n"] += 1
            out_dir = store.staging_dir / task_id / f"exec_{counter['n']:03d}"
            out_dir.mkdir(parents=True, exist_ok=True)
            return run_code_via_worker(
                pool,
                f"{task_id}-{counter['n']}",
                code,
                timeout_s=config.executor_timeout_s,
                out_dir=out_dir,
            )

        return execute

    factory.close = pool.close_all  # type: ignore[attr-defined]
    return factory


def _commit_accepted(
    store: ArtifactStore,
    config: PipelineConfig,
    task: DesignTask,
    code: str,
    report: ValidationReport,
    state: RolloutState,
) -> str:
    artifact_id = default_artifact_id(task.task_id, code)
    staged = store.new_staging_dir(task.task_id)

    paths = report.artifact_paths or {}
    for key in ("stl", "step"):
        source = paths.get(key)
        if not source or not Path(source).is_file():
            raise TaskInfraError(
                RuntimeError(f"accepted report lacks a readable {key} artifact"),
                TaskOutcome(task.task_id, "aborted", state.attempt_index, state.turn_index, {}, {"prompt": 0, "completion": 0}),
            )

    conversation_path = staged / "conversation.jsonl"
    with conversation_path.open("w", encoding="utf-8") as handle:
        for message in state.transcript:
            handle.write(json.dumps(message.to_log_dict(), sort_keys=True) + "\n")

    artifact = Artifact(
        artifact_id=artifact_id,
        task_id=task.task_id,
        category=task.description.category,
        description=task.description.text,
        code=code,
        stl_path=paths["stl"],
        step_path=paths["step"],
        topo=report.topo.to_wire() if report.topo else {},
        created_at=config.fixed_timestamp or store.now(),
        conversation_log_path=str(conversation_path),
    )
    extra_meta = {
        "attempts_used": state.attempt_index,
        "final_turn": state.turn_index,
        "usage": {
            "prompt": state.usage.prompt_tokens,
            "completion": state.usage.completion_tokens,
        },
    }
    store.commit_artifact(artifact, extra_meta)
    store.discard_staging(task.task_id)
    return artifact_id


def load_tasks(config: PipelineConfig) -> list[DesignTask]:
    descriptions = read_catalog(config.task_source)
    codegen_prompt = Path(config.codegen_prompt_path).read_text(encoding="utf-8")
    snippets: dict[str, str] = {}
    if config.taxonomy_path:
        for category in load_taxonomy(config.taxonomy_path):
            if category.reference_snippet:
                snippets[category.name] = category.reference_snippet
    return [
        DesignTask(
            task_id=description.id,
            description=description,
            codegen_prompt=codegen_prompt,
            reference_snippet=snippets.get(description.category),
        )
        for description in descriptions
    ]


def run_pipeline(
    config: PipelineConfig,
    *,
    executor_factory: ExecutorFactory | None = None,
    gates: GeometryGates | None = None,
    selector: EndpointSelector | None = None,
    retry_sleep: Callable[[float], None] = time.sleep,
) -> PipelineSummary:
    """Run every task in the catalog index to exactly one outcome each.

    ``executor_factory`` maps a task id to an execute-code callable; tests
    inject mocks here, production builds a worker pool from worker_cmd.
    """
    tasks = load_tasks(config)
    store = ArtifactStore(config.store_root)
    gates = gates or GeometryGates()
    selector = selector or EndpointSelector(config.endpoints)

    if config.docs_dir:
        corpus = docsmod.load_corpus(config.docs_dir)
    else:
        corpus = docsmod.load_bundled_corpus()
    doc_index = docsmod.build_tfidf_index(corpus)

    owns_factory = executor_factory is None
    if executor_factory is None:
        executor_factory = _default_executor_factory(config, store)

    def _run_one(task: DesignTask) -> TaskOutcome:
        last_failure: TaskOutcome | None = None
        for round_index in range(config.max_task_retries + 1):
            try:
                endpoint_index, endpoint = selector.next_endpoint()
            except NoEndpointAvailable:
                logger.warning("task %s waiting: all endpoints quarantined", task.task_id)
                last_failure = TaskOutcome(
                    task.task_id, "aborted", 0, 0, {}, {"prompt": 0, "completion": 0}
                )
                retry_sleep(1.0)
                continue
            try:
                backend = make_backend(endpoint, task.task_id, replay_loop=config.replay_loop)
                registry = build_tool_registry(
                    executor_factory(task.task_id), doc_index, corpus, gates
                )
                outcome, _state = run_design_task(
                    task,
                    backend,
                    registry,
                    config.caps,
                    on_accept=lambda t, code, report, state: _commit_accepted(
                        store, config, t, code, report, state
                    ),
                )
            except TaskInfraError as exc:
                selector.report_failure(endpoint_index)
                logger.warning(
                    "task %s infra failure (round %d): %s", task.task_id, round_index + 1, exc
                )
                last_failure = exc.partial
                continue
            except Exception:  # noqa: BLE001 - one outcome per task, always
                selector.report_failure(endpoint_index)
                logger.exception("task %s failed unexpectedly (round %d)", task.task_id, round_index + 1)
                last_failure = TaskOutcome(
                    task.task_id, "aborted", 0, 0, {}, {"prompt": 0, "completion": 0}
                )
                continue
            selector.report_success(endpoint_index)
            store.discard_staging(task.task_id)
            return outcome
        assert last_failure is not None
        return last_failure

    outcomes: list[TaskOutcome] = []
    counts = {"accepted": 0, "exhausted": 0, "aborted": 0}
    try:
        if tasks:
            with ThreadPoolExecutor(max_workers=config.max_concurrency) as tpe:
                for outcome in tpe.map(_run_one, tasks):
                    outcomes.append(outcome)
                    counts[outcome.status] += 1
                    store.append_outcome(outcome.to_json_dict())
    finally:
        if owns_factory:
            close = getattr(executor_factory, "close", None)
            if close:
                close()

    stats = compute_generation_stats([o.to_json_dict() for o in outcomes])
    return PipelineSummary(
        n_tasks=len(tasks),
        accepted=counts["accepted"],
        exhausted=counts["exhausted"],
        aborted=counts["aborted"],
        stats=stats.to_json_dict(),
    )
