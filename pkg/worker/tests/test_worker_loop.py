"""Request contract and the NDJSON serve loop, driven through the client side."""
from __future__ import annotations

import io
import json
import subprocess
import sys
import time

import pytest

from cadforge.execbridge import ExecRequest, WorkerClient, parse_response_line

from cadworker.protocol import (
    FALLBACK_REQUEST_ID,
    RequestError,
    WorkerRequest,
    parse_request_line,
    salvage_request_id,
)
from cadworker.__main__ import serve

TINY_CODE = "import cadquery as cq\nresult = cq.Workplane('XY').rect(4, 4).extrude(2)"


def request_line(request_id: str, code: str, out_dir: str, timeout_s: float = 30.0) -> str:
    return json.dumps(
        {"request_id": request_id, "code": code, "timeout_s": timeout_s, "out_dir": out_dir}
    )


class TestRequestParsing:
    def test_round_trip(self):
        parsed = parse_request_line(request_line("r1", "result = 1", "/tmp/x", 5.0))
        assert parsed == WorkerRequest("r1", "result = 1", 5.0, "/tmp/x")

    @pytest.mark.parametrize(
        "line",
        [
            "not json",
            "[1, 2]",
            json.dumps({"request_id": "r", "code": "x"}),
            json.dumps({"request_id": "", "code": "x", "timeout_s": 1, "out_dir": "d"}),
            json.dumps({"request_id": "r", "code": "  ", "timeout_s": 1, "out_dir": "d"}),
            json.dumps({"request_id": "r", "code": "x", "timeout_s": 0, "out_dir": "d"}),
            json.dumps({"request_id": "r", "code": "x", "timeout_s": 601, "out_dir": "d"}),
            json.dumps({"request_id": "r", "code": "x", "timeout_s": "soon", "out_dir": "d"}),
            json.dumps({"request_id": "r", "code": "x", "timeout_s": 1, "out_dir": ""}),
        ],
    )
    def test_invalid_requests_rejected(self, line):
        with pytest.raises(RequestError):
            parse_request_line(line)

    def test_salvage_id_from_broken_request(self):
        assert salvage_request_id(json.dumps({"request_id": "r9"})) == "r9"
        assert salvage_request_id("garbage") == FALLBACK_REQUEST_ID
        assert salvage_request_id(json.dumps({"request_id": 3})) == FALLBACK_REQUEST_ID


class TestServeLoop:
    def test_malformed_line_answers_and_loop_continues(self, tmp_path):
        stdin = io.StringIO(
            "this is not a request\n"
            + request_line("good", TINY_CODE, str(tmp_path / "out"))
            + "\n"
        )
        stdout = io.StringIO()
        assert serve(stdin, stdout) == 0
        lines = stdout.getvalue().splitlines()
        assert len(lines) == 2
        bad = parse_response_line(lines[0])
        assert bad.request_id == FALLBACK_REQUEST_ID
        assert bad.report.exec_status == "error"
        good = parse_response_line(lines[1])
        assert good.request_id == "good"
        assert good.report.exec_status == "ok"

    def test_blank_lines_are_ignored(self, tmp_path):
        stdin = io.StringIO("\n\n" + request_line("r", TINY_CODE, str(tmp_path)) + "\n\n")
        stdout = io.StringIO()
        serve(stdin, stdout)
        assert len(stdout.getvalue().splitlines()) == 1


class TestWorkerProcess:
    def test_clean_shutdown_exit_code_zero(self, worker_cmd):
        proc = subprocess.Popen(worker_cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        proc.stdin.close()
        assert proc.wait(timeout=30) == 0

    def test_execute_round_trip(self, worker_cmd, tmp_path):
        client = WorkerClient(worker_cmd)
        try:
            response = client.execute(
                ExecRequest("t1", TINY_CODE, timeout_s=30.0, out_dir=str(tmp_path))
            )
            assert response.report.exec_status == "ok"
            assert (tmp_path / "model.stl").is_file()
            assert (tmp_path / "model.step").is_file()
            assert response.wall_time_s > 0
        finally:
            client.close()

    def test_timeout_is_enforced_with_grace(self, worker_cmd, tmp_path):
        client = WorkerClient(worker_cmd)
        try:
            started = time.monotonic()
            response = client.execute(
                ExecRequest("t2", "while True: pass", timeout_s=2.0, out_dir=str(tmp_path))
            )
            elapsed = time.monotonic() - started
            assert response.report.exec_status == "timeout"
            assert elapsed < 2.0 + 2.0 + 1.5  # timeout + kill grace + slack
        finally:
            client.close()

    def test_child_crash_does_not_kill_the_loop(self, worker_cmd, tmp_path):
        client = WorkerClient(worker_cmd)
        try:
            crash = client.execute(
                ExecRequest(
                    "t3",
                    "import os, signal\nos.kill(os.getpid(), signal.SIGSEGV)",
                    timeout_s=30.0,
                    out_dir=str(tmp_path / "a"),
                )
            )
            assert crash.report.exec_status == "error"
            assert "signal" in crash.report.error_message
            follow_up = client.execute(
                ExecRequest("t4", TINY_CODE, timeout_s=30.0, out_dir=str(tmp_path / "b"))
            )
            assert follow_up.report.exec_status == "ok"
            assert client.alive
        finally:
            client.close()
