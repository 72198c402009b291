"""NDJSON worker loop: one request line in, one response line out.

Runs until stdin closes, then exits 0. Request failures of any kind become
error responses; only the transport itself (stdin/stdout) can stop the loop.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import protocol, runner


def serve(stdin=None, stdout=None, *, grace_s: float = runner.GRACE_KILL_S) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = protocol.parse_request_line(line)
        except protocol.RequestError as exc:
            response = protocol.error_response(protocol.salvage_request_id(line), 0.0, str(exc))
        else:
            response = runner.execute_request(request, grace_s=grace_s)
        stdout.write(protocol.encode_response(response) + "\n")
        stdout.flush()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cadworker",
        description="CAD program execution worker speaking newline-delimited JSON on stdin/stdout.",
    )
    parser.add_argument(
        "--grace-s",
        type=float,
        default=runner.GRACE_KILL_S,
        help="seconds between SIGTERM and SIGKILL when a request times out",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log request handling to stderr")
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return serve(grace_s=args.grace_s)


if __name__ == "__main__":
    sys.exit(main())
