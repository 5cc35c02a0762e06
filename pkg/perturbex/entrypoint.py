"""Single console script: MCP server mode or CLI mode.

``perturbex`` and ``perturbex serve`` start the MCP server (stdio by default,
``perturbex serve --transport http --port 8000`` for streamable HTTP); any
other first argument is handed to :mod:`perturbex.cli`.
"""

from __future__ import annotations

import argparse
import sys

from . import cli, server

SERVER_COMMAND = "serve"
TRANSPORTS = ("stdio", "http", "sse")


def _exit_code(code: object) -> int:
    if code is None:
        return 0
    return code if isinstance(code, int) else 1


def _serve(args: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="perturbex serve")
    parser.add_argument("--transport", choices=TRANSPORTS, default="stdio")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    try:
        options = parser.parse_args(args)
        server.main(transport=options.transport, host=options.host, port=options.port)
    except SystemExit as exc:
        return _exit_code(exc.code)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        return _serve([])
    if args[0] == SERVER_COMMAND:
        return _serve(args[1:])
    try:
        return cli.main(args)
    except SystemExit as exc:
        return _exit_code(exc.code)
