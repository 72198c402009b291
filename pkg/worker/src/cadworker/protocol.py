"""Wire protocol: request parsing and response assembly for the NDJSON loop."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

MAX_TIMEOUT_S = 600.0
FALLBACK_REQUEST_ID = "invalid-request"


class RequestError(Exception):
    """The incoming line does not satisfy the request contract."""


@dataclass(frozen=True)
class WorkerRequest:
    request_id: str
    code: str
    timeout_s: float
    out_dir: str


def parse_request_line(line: str) -> WorkerRequest:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RequestError(f"request is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise RequestError("request must be a JSON object")
    missing = [key for key in ("request_id", "code", "timeout_s", "out_dir") if key not in payload]
    if missing:
        raise RequestError(f"request is missing fields: {', '.join(missing)}")
    request_id = payload["request_id"]
    code = payload["code"]
    if not isinstance(request_id, str) or not request_id:
        raise RequestError("request_id must be a nonempty string")
    if not isinstance(code, str) or not code.strip():
        raise RequestError("code must be a nonempty string")
    try:
        timeout_s = float(payload["timeout_s"])
    except (TypeError, ValueError) as exc:
        raise RequestError("timeout_s must be a number") from exc
    if not 0.0 < timeout_s <= MAX_TIMEOUT_S:
        raise RequestError(f"timeout_s must be in (0, {MAX_TIMEOUT_S:g}]")
    out_dir = payload["out_dir"]
    if not isinstance(out_dir, str) or not out_dir:
        raise RequestError("out_dir must be a nonempty string")
    return WorkerRequest(request_id=request_id, code=code, timeout_s=timeout_s, out_dir=out_dir)


def salvage_request_id(line: str) -> str:
    """Best-effort id recovery so even rejected requests can be answered."""
    try:
        payload = json.loads(line)
    except json.JSONDecodeError:
        return FALLBACK_REQUEST_ID
    if isinstance(payload, dict):
        request_id = payload.get("request_id")
        if isinstance(request_id, str) and request_id:
            return request_id
    return FALLBACK_REQUEST_ID


def build_response(request_id: str, wall_time_s: float, fragment: dict[str, Any]) -> dict[str, Any]:
    response = {
        "request_id": request_id,
        "wall_time_s": max(0.0, float(wall_time_s)),
        "error_message": None,
        "traceback": None,
        "topo": None,
        "exports": None,
        "artifact_paths": None,
    }
    response.update(fragment)
    return response


def error_response(request_id: str, wall_time_s: float, message: str, trace: str | None = None) -> dict[str, Any]:
    return build_response(
        request_id,
        wall_time_s,
        {"exec_status": "error", "error_message": message, "traceback": trace},
    )


def timeout_response(request_id: str, wall_time_s: float, timeout_s: float) -> dict[str, Any]:
    return build_response(
        request_id,
        wall_time_s,
        {
            "exec_status": "timeout",
            "error_message": f"execution exceeded {timeout_s:g}s timeout",
        },
    )


def encode_response(response: dict[str, Any]) -> str:
    return json.dumps(response, sort_keys=True)
