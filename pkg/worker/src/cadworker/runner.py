"""Per-request child process management.

Each request runs in a fresh child (``python -m cadworker.child``) inside its
own session and a scratch working directory. The parent enforces the request
timeout with SIGTERM, escalating to SIGKILL after a grace period; a crashing
or hanging child therefore never takes the worker loop down with it.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from pathlib import Path
from typing import Any

from . import protocol

logger = logging.getLogger(__name__)

GRACE_KILL_S = 2.0
STDERR_TAIL_CHARS = 4000
# environment variables the child keeps; everything else is dropped
_KEPT_ENV = ("PATH", "PYTHONPATH", "LD_LIBRARY_PATH", "PYTHONHOME")


def _child_env(scratch: str) -> dict[str, str]:
    env = {key: os.environ[key] for key in _KEPT_ENV if key in os.environ}
    env["HOME"] = scratch
    env["PYTHONDONTWRITEBYTECODE"] = "1"
    return env


def _terminate_group(proc: subprocess.Popen, grace_s: float) -> None:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        return
    try:
        proc.wait(timeout=grace_s)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()


def execute_request(
    request: protocol.WorkerRequest,
    *,
    python: str = sys.executable,
    grace_s: float = GRACE_KILL_S,
) -> dict[str, Any]:
    """Run one request in a fresh child and return the full response dict."""
    started = time.monotonic()
    out_dir = Path(request.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return protocol.error_response(
            request.request_id, time.monotonic() - started, f"cannot create out_dir: {exc}"
        )

    scratch = tempfile.mkdtemp(prefix="cadworker-")
    report_path = Path(scratch) / "report.json"
    payload = json.dumps(
        {
            "code": request.code,
            "out_dir": str(out_dir.resolve()),
            "report_path": str(report_path),
        }
    )
    try:
        proc = subprocess.Popen(
            [python, "-m", "cadworker.child"],
            stdin=subprocess.PIPE,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            cwd=scratch,
            env=_child_env(scratch),
            start_new_session=True,
            text=True,
        )
        try:
            _, stderr_text = proc.communicate(payload, timeout=request.timeout_s)
        except subprocess.TimeoutExpired:
            _terminate_group(proc, grace_s)
            proc.communicate()
            logger.info("request %s timed out after %.1fs", request.request_id, request.timeout_s)
            return protocol.timeout_response(
                request.request_id, time.monotonic() - started, request.timeout_s
            )

        wall_time_s = time.monotonic() - started
        tail = (stderr_text or "")[-STDERR_TAIL_CHARS:] or None
        if proc.returncode != 0:
            if proc.returncode < 0:
                message = f"child process died with signal {-proc.returncode}"
            else:
                message = f"child process exited with code {proc.returncode}"
            logger.warning("request %s: %s", request.request_id, message)
            return protocol.error_response(request.request_id, wall_time_s, message, tail)
        try:
            fragment = json.loads(report_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            return protocol.error_response(
                request.request_id, wall_time_s, f"child produced no usable report: {exc}", tail
            )
        return protocol.build_response(request.request_id, wall_time_s, fragment)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
