"""Spawn-per-call worker execution with OS resource limits.

Every model call runs in a brand new child process: the runtime writes one
boxed-JSON request to the child's stdin, reads one boxed-JSON response from
its stdout, and the child is gone before :func:`invoke` returns. Nothing
survives between calls, which is the whole point.

The sandbox at this scale is the process boundary itself: CPU and
address-space rlimits, a private scratch directory (exported as
``PRISM_SCRATCH_DIR`` and used as cwd/HOME/TMPDIR), a scrubbed environment,
and a hard wall-clock deadline with a short kill grace. Manifests carry an
``isolation`` tag so a container-backed runner can replace this one without
touching callers.
"""

from __future__ import annotations

import logging
import math
import os
import resource
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from . import wire
from .errors import PrismError

if TYPE_CHECKING:
    from .registry import ModelManifest

log = logging.getLogger(__name__)

SCRATCH_ENV_VAR = "PRISM_SCRATCH_DIR"
KILL_GRACE_SECONDS = 0.5

_ENV_PASSTHROUGH = ("PATH", "LANG", "LC_ALL", "PYTHONPATH")
_OOM_MARKERS = ("MemoryError", "bad_alloc", "Cannot allocate memory", "out of memory")


@dataclass(frozen=True)
class ResourceLimits:
    """Per-call ceilings enforced on the worker process."""

    wall_timeout: float = 10.0
    cpu_limit: float = 5.0
    memory_limit: int = 512 * 1024 * 1024
    max_output_bytes: int = 8 * 1024 * 1024

    def __post_init__(self) -> None:
        if (
            self.wall_timeout <= 0
            or self.cpu_limit <= 0
            or self.memory_limit <= 0
            or self.max_output_bytes <= 0
        ):
            raise ValueError("all resource limits must be strictly positive")


@dataclass(frozen=True)
class WorkerRequest:
    """The one frame a worker receives: which function, with what input."""

    func: str
    model_input: Optional[dict] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.func not in (wire.FUNC_GET_DEFAULT_INPUT, wire.FUNC_MODEL_RUN):
            raise ValueError(f"func {self.func!r} never reaches a worker")


@dataclass(frozen=True)
class WorkerResponse:
    """The one frame a worker writes back."""

    error_code: int
    result: Optional[dict] = None
    error_message: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error_code == 0


@dataclass(frozen=True)
class UsageReport:
    cpu_seconds: float
    wall_seconds: float
    max_rss_bytes: int = 0


@dataclass(frozen=True)
class HandshakeReport:
    ok: bool
    default_input_keys: int


class WorkerError(PrismError):
    """Base for failures of a single worker invocation."""

    def __init__(self, message: str, usage: Optional[UsageReport] = None):
        super().__init__(message)
        self.usage = usage


class PluginNotFound(WorkerError):
    """The manifest's command does not name an executable."""


class WorkerTimeout(WorkerError):
    """The worker exceeded its wall-clock deadline and was killed."""


class WorkerOomOrCpuKill(WorkerError):
    """The worker breached its CPU or memory limit."""


class WorkerCrashed(WorkerError):
    """The worker exited nonzero or broke the one-shot framing."""


def _child_env(scratch: str) -> dict[str, str]:
    env = {
        SCRATCH_ENV_VAR: scratch,
        "HOME": scratch,
        "TMPDIR": scratch,
        "PYTHONDONTWRITEBYTECODE": "1",
    }
    for key in _ENV_PASSTHROUGH:
        val = os.environ.get(key)
        if val:
            env[key] = val
    return env


def _make_preexec(limits: ResourceLimits):
    cpu_ceiling = max(1, math.ceil(limits.cpu_limit))

    def _apply() -> None:
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_ceiling, cpu_ceiling + 1))
        resource.setrlimit(resource.RLIMIT_AS, (limits.memory_limit, limits.memory_limit))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))

    return _apply


class _PipeReader(threading.Thread):
    """Drains a pipe to EOF, keeping at most `cap` + 1 bytes."""

    def __init__(self, stream, cap: int):
        super().__init__(daemon=True)
        self._stream = stream
        self._cap = cap
        self._chunks: list[bytes] = []
        self._kept = 0
        self.total = 0
        self.start()

    def run(self) -> None:
        try:
            while True:
                chunk = self._stream.read(65536)
                if not chunk:
                    break
                self.total += len(chunk)
                if self._kept <= self._cap:
                    keep = chunk[: self._cap + 1 - self._kept]
                    self._chunks.append(keep)
                    self._kept += len(keep)
        except (OSError, ValueError):
            pass

    def data(self) -> bytes:
        self.join(timeout=2.0)
        return b"".join(self._chunks)


def _write_request(proc: subprocess.Popen, payload: bytes) -> None:
    def _feed() -> None:
        try:
            proc.stdin.write(payload)
            proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass
        finally:
            try:
                proc.stdin.close()
            except OSError:
                pass

    threading.Thread(target=_feed, daemon=True).start()


def _reap(proc: subprocess.Popen, block: bool) -> Optional[tuple[int, resource.struct_rusage]]:
    """wait4 the child; returns (status, rusage) or None if still running."""
    flags = 0 if block else os.WNOHANG
    try:
        pid, status, rusage = os.wait4(proc.pid, flags)
    except ChildProcessError:
        return None
    if pid == 0:
        return None
    # Record the exit so Popen does not try to reap a second time.
    proc.returncode = -os.WTERMSIG(status) if os.WIFSIGNALED(status) else os.WEXITSTATUS(status)
    return status, rusage


def _kill_group(proc: subprocess.Popen, grace: float) -> tuple[int, resource.struct_rusage]:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        pass
    deadline = time.monotonic() + grace
    while time.monotonic() < deadline:
        reaped = _reap(proc, block=False)
        if reaped:
            return reaped
        time.sleep(0.005)
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    reaped = _reap(proc, block=True)
    assert reaped is not None
    return reaped


def invoke(
    manifest: "ModelManifest",
    req: WorkerRequest,
    limits: Optional[ResourceLimits] = None,
) -> tuple[WorkerResponse, UsageReport]:
    """Run one model call in a fresh worker process.

    Raises PluginNotFound, WorkerTimeout, WorkerOomOrCpuKill, or
    WorkerCrashed; every raised error carries the measured UsageReport so
    callers can still charge quota.
    """
    limits = limits or manifest.limits
    frame: dict = {"func": req.func}
    if req.model_input is not None:
        frame["model_input"] = req.model_input
    if req.seed is not None:
        frame["seed"] = req.seed
    payload = (wire.encode_boxed_object(frame) + "\n").encode("utf-8")

    scratch = tempfile.mkdtemp(prefix="prism-worker-")
    started = time.monotonic()
    try:
        try:
            proc = subprocess.Popen(
                list(manifest.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                cwd=scratch,
                env=_child_env(scratch),
                start_new_session=True,
                preexec_fn=_make_preexec(limits),
            )
        except FileNotFoundError as exc:
            raise PluginNotFound(f"plugin executable not found: {manifest.command[0]}") from exc
        except PermissionError as exc:
            raise PluginNotFound(f"plugin executable not runnable: {manifest.command[0]}") from exc

        stdout_reader = _PipeReader(proc.stdout, limits.max_output_bytes)
        stderr_reader = _PipeReader(proc.stderr, 64 * 1024)
        _write_request(proc, payload)

        deadline = started + limits.wall_timeout
        reaped = None
        while time.monotonic() < deadline:
            reaped = _reap(proc, block=False)
            if reaped:
                break
            time.sleep(0.003)

        timed_out = reaped is None
        if timed_out:
            reaped = _kill_group(proc, KILL_GRACE_SECONDS)

        status, rusage = reaped
        wall = time.monotonic() - started
        usage = UsageReport(
            cpu_seconds=rusage.ru_utime + rusage.ru_stime,
            wall_seconds=wall,
            max_rss_bytes=rusage.ru_maxrss * 1024,
        )
        stdout = stdout_reader.data()
        stderr = stderr_reader.data()

        if timed_out:
            raise WorkerTimeout(
                f"worker exceeded wall_timeout of {limits.wall_timeout}s", usage
            )
        return _interpret_exit(status, stdout, stderr, limits, usage)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _interpret_exit(
    status: int,
    stdout: bytes,
    stderr: bytes,
    limits: ResourceLimits,
    usage: UsageReport,
) -> tuple[WorkerResponse, UsageReport]:
    stderr_tail = stderr[-2048:].decode("utf-8", "replace").strip()

    if os.WIFSIGNALED(status):
        sig = os.WTERMSIG(status)
        if sig in (signal.SIGXCPU, signal.SIGKILL) and usage.cpu_seconds >= limits.cpu_limit * 0.9:
            raise WorkerOomOrCpuKill(
                f"worker killed after {usage.cpu_seconds:.2f} cpu-seconds "
                f"(limit {limits.cpu_limit})",
                usage,
            )
        raise WorkerCrashed(f"worker killed by signal {sig}: {stderr_tail}", usage)

    exit_code = os.WEXITSTATUS(status)
    if exit_code != 0:
        if any(marker in stderr_tail for marker in _OOM_MARKERS):
            raise WorkerOomOrCpuKill(
                f"worker breached memory_limit of {limits.memory_limit} bytes", usage
            )
        if usage.cpu_seconds >= limits.cpu_limit:
            raise WorkerOomOrCpuKill(
                f"worker breached cpu_limit of {limits.cpu_limit} cpu-seconds", usage
            )
        raise WorkerCrashed(f"worker exited {exit_code}: {stderr_tail}", usage)

    if len(stdout) > limits.max_output_bytes:
        raise WorkerCrashed(
            f"worker output exceeded max_output_bytes ({limits.max_output_bytes})", usage
        )

    text = stdout.decode("utf-8", errors="strict") if _is_utf8(stdout) else None
    if text is None:
        raise WorkerCrashed("worker output is not valid UTF-8", usage)
    try:
        value, remainder = wire.decode_first_document(text)
    except wire.MalformedJson as exc:
        raise WorkerCrashed(f"worker wrote a malformed response: {exc}", usage) from exc
    if remainder.strip():
        raise WorkerCrashed("worker wrote extra bytes after its response document", usage)

    return _parse_response_frame(value, usage), usage


def _is_utf8(data: bytes) -> bool:
    try:
        data.decode("utf-8")
        return True
    except UnicodeDecodeError:
        return False


def _parse_response_frame(value: wire.ModelValue, usage: UsageReport) -> WorkerResponse:
    if not isinstance(value, dict):
        raise WorkerCrashed("worker response must be a JSON object", usage)
    code = value.get("error_code")
    if not isinstance(code, int) or isinstance(code, bool):
        raise WorkerCrashed("worker response is missing an integer error_code", usage)
    if code == 0:
        result = value.get("result")
        if not isinstance(result, dict):
            raise WorkerCrashed("worker success frame must carry a result map", usage)
        return WorkerResponse(error_code=0, result=result)
    message = value.get("error_message")
    if message is not None and not isinstance(message, str):
        raise WorkerCrashed("worker error_message must be a string", usage)
    return WorkerResponse(error_code=code, error_message=message)


def validate_plugin(manifest: "ModelManifest") -> HandshakeReport:
    """Startup health check: fetch the plugin's default input once and
    report how many parameters it declares."""
    response, _usage = invoke(
        manifest, WorkerRequest(func=wire.FUNC_GET_DEFAULT_INPUT)
    )
    if not response.ok:
        raise WorkerCrashed(
            f"plugin rejected a default-input request: {response.error_message}"
        )
    return HandshakeReport(ok=True, default_input_keys=len(response.result))
