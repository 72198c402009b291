"""Client side of the executor worker protocol.

A worker is a child process speaking newline-delimited JSON on stdin/stdout:
one request line in, one response line out, one request in flight at a time.
Responses are validated against the shared contract schema before parsing.
Closing stdin asks the worker to exit cleanly.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import select
import subprocess
import time
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterator

import jsonschema

from .validation import ValidationReport

logger = logging.getLogger(__name__)

DEFAULT_EXEC_TIMEOUT_S = 60.0
MAX_EXEC_TIMEOUT_S = 600.0
# extra wall time allowed for the worker's own bookkeeping around the child
RESPONSE_GRACE_S = 30.0


class ExecBridgeError(Exception):
    """Base class for executor transport failures."""


class WorkerCrashError(ExecBridgeError):
    """The worker process died or missed its response deadline."""


class ProtocolError(ExecBridgeError):
    """The worker answered with bytes that violate the shared contract."""


@dataclass(frozen=True)
class ExecRequest:
    request_id: str
    code: str
    timeout_s: float = DEFAULT_EXEC_TIMEOUT_S
    out_dir: str = "."

    def __post_init__(self) -> None:
        if not self.request_id:
            raise ValueError("request_id must be nonempty")
        if not self.code.strip():
            raise ValueError("code must be nonempty")
        if not 0.0 < self.timeout_s <= MAX_EXEC_TIMEOUT_S:
            raise ValueError(f"timeout_s must be in (0, {MAX_EXEC_TIMEOUT_S}]")

    def to_wire(self) -> dict[str, Any]:
        return {
            "request_id": self.request_id,
            "code": self.code,
            "timeout_s": self.timeout_s,
            "out_dir": self.out_dir,
        }


@dataclass(frozen=True)
class ExecResponse:
    request_id: str
    wall_time_s: float
    report: ValidationReport


def load_report_schema() -> dict[str, Any]:
    text = resources.files("cadforge.contracts").joinpath("exec_report.schema.json").read_text()
    return json.loads(text)


_REPORT_VALIDATOR = jsonschema.Draft7Validator(load_report_schema())


def parse_response_line(line: str) -> ExecResponse:
    """Validate one response line against the contract and build an ExecResponse."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"worker response is not JSON: {exc}") from exc
    errors = sorted(_REPORT_VALIDATOR.iter_errors(payload), key=str)
    if errors:
        raise ProtocolError(f"worker response violates contract: {errors[0].message}")
    report_fields = {
        key: value
        for key, value in payload.items()
        if key not in ("request_id", "wall_time_s")
    }
    return ExecResponse(
        request_id=str(payload["request_id"]),
        wall_time_s=float(payload["wall_time_s"]),
        report=ValidationReport.from_wire(report_fields),
    )


class WorkerClient:
    """Owns one worker process; not safe for concurrent use by design."""

    def __init__(self, cmd: list[str], *, response_grace_s: float = RESPONSE_GRACE_S) -> None:
        if not cmd:
            raise ValueError("worker command must be nonempty")
        self.cmd = list(cmd)
        self.response_grace_s = response_grace_s
        self._proc: subprocess.Popen[bytes] | None = None
        self._buffer = b""

    @property
    def alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def start(self) -> None:
        if self.alive:
            return
        self._buffer = b""
        self._proc = subprocess.Popen(
            self.cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            bufsize=0,
        )
        logger.debug("started worker pid=%d cmd=%s", self._proc.pid, self.cmd)

    def execute(self, request: ExecRequest) -> ExecResponse:
        """Send one request and block for its response line.

        Raises WorkerCrashError if the worker dies or misses the deadline;
        the dead process is reaped so the next call starts a fresh worker.
        """
        self.start()
        proc = self._proc
        assert proc is not None and proc.stdin is not None
        line = json.dumps(request.to_wire(), sort_keys=True) + "\n"
        try:
            proc.stdin.write(line.encode("utf-8"))
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._reap()
            raise WorkerCrashError(f"worker stdin closed: {exc}") from exc

        deadline = time.monotonic() + request.timeout_s + self.response_grace_s
        raw = self._read_line(deadline)
        response = parse_response_line(raw)
        if response.request_id != request.request_id:
            raise ProtocolError(
                f"response id {response.request_id!r} != request id {request.request_id!r}"
            )
        return response

    def _read_line(self, deadline: float) -> str:
        proc = self._proc
        assert proc is not None and proc.stdout is not None
        fd = proc.stdout.fileno()
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self._kill()
                raise WorkerCrashError("worker missed its response deadline")
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                self._reap()
                raise WorkerCrashError("worker closed stdout (crashed?)")
            self._buffer += chunk
        raw, self._buffer = self._buffer.split(b"\n", 1)
        return raw.decode("utf-8")

    def close(self) -> None:
        proc = self._proc
        if proc is None:
            return
        try:
            if proc.stdin is not None:
                proc.stdin.close()
            proc.wait(timeout=5.0)
        except (OSError, subprocess.TimeoutExpired):
            self._kill()
        finally:
            self._reap()

    def _kill(self) -> None:
        proc = self._proc
        if proc is not None and proc.poll() is None:
            proc.kill()
            proc.wait()
        self._reap()

    def _reap(self) -> None:
        proc = self._proc
        if proc is not None:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
            for stream in (proc.stdin, proc.stdout):
                if stream is not None:
                    try:
                        stream.close()
                    except OSError:
                        pass
        self._proc = None
        self._buffer = b""


class WorkerPool:
    """Fixed-size pool of WorkerClients; one request in flight per worker."""

    def __init__(self, cmd: list[str], size: int) -> None:
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._idle: queue.Queue[WorkerClient] = queue.Queue()
        self._all: list[WorkerClient] = []
        for _ in range(size):
            client = WorkerClient(cmd)
            self._all.append(client)
            self._idle.put(client)

    @contextmanager
    def checkout(self) -> Iterator[WorkerClient]:
        client = self._idle.get()
        try:
            yield client
        finally:
            self._idle.put(client)

    def close_all(self) -> None:
        for client in self._all:
            client.close()


def run_code_via_worker(
    pool: WorkerPool,
    request_id: str,
    code: str,
    *,
    timeout_s: float = DEFAULT_EXEC_TIMEOUT_S,
    out_dir: str | Path = ".",
) -> ValidationReport:
    """Convenience wrapper matching the rollout executor callable shape."""
    request = ExecRequest(
        request_id=request_id, code=code, timeout_s=timeout_s, out_dir=str(out_dir)
    )
    with pool.checkout() as client:
        return client.execute(request).report
