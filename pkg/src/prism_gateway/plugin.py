"""Harness for writing worker plugins over the stdio contract.

A plugin reads exactly one boxed-JSON request document from stdin, writes
exactly one boxed-JSON response document to stdout, and exits 0. Any other
behaviour (nonzero exit, extra stdout, malformed frames) is reported to the
caller as a crashed worker. ``PRISM_SCRATCH_DIR`` names the only directory
a plugin should write to.

The handler gets ``(func, model_input, seed)`` and returns the result map.
Raise :class:`PluginInputError` for invalid model input; it becomes a
structured error frame rather than a crash.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Callable, Optional

from . import wire

Handler = Callable[[str, Optional[dict], Optional[int]], dict]


class PluginInputError(Exception):
    """Model input violates the plugin's domain; maps to an error frame."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


SCRATCH_ENV_VAR = "PRISM_SCRATCH_DIR"


def scratch_dir() -> Path:
    """The writable scratch directory assigned to this worker."""
    return Path(os.environ.get(SCRATCH_ENV_VAR, "."))


def run_plugin(handler: Handler) -> int:
    """Serve one request from stdin and exit; returns the process exit code."""
    raw = sys.stdin.buffer.read()
    request = wire.decode_boxed(raw)
    if not isinstance(request, dict) or not isinstance(request.get("func"), str):
        frame = {"error_code": 1, "error_message": "malformed worker request"}
        _emit(frame)
        return 0

    func = request["func"]
    model_input = request.get("model_input")
    seed = request.get("seed")
    if model_input is not None and not isinstance(model_input, dict):
        frame = {"error_code": 1, "error_message": "model_input must be a map"}
        _emit(frame)
        return 0

    try:
        result = handler(func, model_input, seed)
        frame = {"error_code": 0, "result": result}
    except PluginInputError as exc:
        frame = {"error_code": exc.code, "error_message": str(exc)}
    _emit(frame)
    return 0


def _emit(frame: dict) -> None:
    sys.stdout.write(wire.encode_boxed_object(frame))
    sys.stdout.write("\n")
    sys.stdout.flush()
