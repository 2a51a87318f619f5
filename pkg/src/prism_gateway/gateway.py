"""The HTTP service: routes → auth → quota → workers/jobs, plus serve().

Request pipeline for the three call routes: parse the route, authenticate
the ``x-prism-auth-user`` header, parse the envelope, resolve the model,
authorize, admit against the caller's CPU quota, then dispatch by
(route mode, func). Every response body — success or error — is a boxed
document carrying ``error_code``; nonzero codes are stable per error class:

    1 malformed   2 auth        3 forbidden   4 not found
    5 quota       6 timeout     7 worker      8 queue full
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from . import registry as registry_mod
from . import runtime, wire
from .auth import (
    ANONYMOUS,
    AUTH_HEADER,
    ANONYMOUS_ID,
    ApiKeyRecord,
    Caller,
    Forbidden,
    InvalidKey,
    KeyStore,
    RequestLog,
    RequestLogEntry,
    authorize,
)
from .errors import PrismError
from .jobs import AsyncUnsupported, JobManager, QueueFull, UnknownToken
from .quota import QuotaExceeded, QuotaLedger, QuotaPolicy
from .registry import ModelNotFound, Registry
from .runtime import (
    PluginNotFound,
    UsageReport,
    WorkerCrashed,
    WorkerError,
    WorkerOomOrCpuKill,
    WorkerRequest,
    WorkerTimeout,
)
from .wire import (
    EnvelopeError,
    InvalidModelName,
    MalformedJson,
    NonCanonicalBoxing,
    RouteMode,
    UnknownRoute,
    parse_route,
    parse_run_envelope,
)

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 10 * 1024 * 1024

CODE_MALFORMED = 1
CODE_AUTH = 2
CODE_FORBIDDEN = 3
CODE_NOT_FOUND = 4
CODE_QUOTA = 5
CODE_TIMEOUT = 6
CODE_WORKER = 7
CODE_QUEUE_FULL = 8


class ConfigError(PrismError):
    """The gateway configuration is unusable."""


class BindFailure(PrismError):
    """Could not bind the configured address."""


class _PluginReported(PrismError):
    """A worker answered with a nonzero error_code (bad model input)."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


_ERROR_TABLE: list[tuple[type, int, int]] = [
    (InvalidKey, 401, CODE_AUTH),
    (Forbidden, 403, CODE_FORBIDDEN),
    (QuotaExceeded, 429, CODE_QUOTA),
    (ModelNotFound, 404, CODE_NOT_FOUND),
    (UnknownToken, 404, CODE_NOT_FOUND),
    (UnknownRoute, 404, CODE_NOT_FOUND),
    (InvalidModelName, 404, CODE_NOT_FOUND),
    (WorkerTimeout, 408, CODE_TIMEOUT),
    (QueueFull, 503, CODE_QUEUE_FULL),
    (AsyncUnsupported, 400, CODE_MALFORMED),
    (PluginNotFound, 500, CODE_WORKER),
    (WorkerOomOrCpuKill, 500, CODE_WORKER),
    (WorkerCrashed, 500, CODE_WORKER),
    (EnvelopeError, 400, CODE_MALFORMED),
    (NonCanonicalBoxing, 400, CODE_MALFORMED),
    (MalformedJson, 400, CODE_MALFORMED),
]


@dataclass(frozen=True)
class Response:
    status: int
    body: bytes
    headers: dict = field(default_factory=dict)
    cpu_seconds: float = 0.0


@dataclass
class GatewayConfig:
    bind_address: str = "127.0.0.1:8080"
    models_dir: str = "models"
    keys_path: str = "var/keys.json"
    jobs_path: str = "var/jobs.jsonl"
    log_path: str = "var/requests.jsonl"
    anonymous_quota: QuotaPolicy = field(default_factory=QuotaPolicy)
    pool_size: int = field(default_factory=lambda: os.cpu_count() or 2)
    retention: float = 24 * 3600.0
    queue_depth: int = 1000

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ConfigError("pool_size must be at least 1")
        paths = [self.keys_path, self.jobs_path, self.log_path]
        if len(set(map(str, paths))) != len(paths):
            raise ConfigError("keys_path, jobs_path, and log_path must be distinct")

    @property
    def outbox_path(self) -> str:
        return str(Path(self.jobs_path).parent / "outbox.jsonl")

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind_address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bind_address {self.bind_address!r} is not host:port")
        return host, int(port)


def load_config(path: str | Path) -> GatewayConfig:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    kwargs = dict(data)
    if "anonymous_quota" in kwargs:
        try:
            kwargs["anonymous_quota"] = QuotaPolicy(**kwargs["anonymous_quota"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad anonymous_quota: {exc}") from exc
    try:
        return GatewayConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc


class PrismService:
    """Everything behind the socket: wiring plus the request pipeline."""

    def __init__(self, config: GatewayConfig, clock=time.time):
        self.config = config
        self._clock = clock
        try:
            self.registry: Registry = registry_mod.load_registry(config.models_dir)
        except PrismError as exc:
            raise ConfigError(f"cannot load models: {exc}") from exc
        self.keys = KeyStore(config.keys_path)
        self.ledger = QuotaLedger(clock=clock)
        self.request_log = RequestLog(config.log_path)
        self._worker_slots = threading.BoundedSemaphore(config.pool_size)
        self.jobs = JobManager(
            journal_path=config.jobs_path,
            outbox_path=config.outbox_path,
            resolve=lambda name: self.registry.resolve(name),
            invoke=self._pooled_invoke,
            pool_size=config.pool_size,
            queue_depth=config.queue_depth,
            retention_seconds=config.retention,
            clock=clock,
            on_charge=self.ledger.charge_direct,
        )

    def start(self) -> None:
        self.jobs.start()

    def stop(self) -> None:
        self.jobs.stop()

    def reload(self) -> None:
        """Swap in fresh registry and key snapshots (explicit, not watched)."""
        self.registry = registry_mod.load_registry(self.config.models_dir)
        self.keys = KeyStore(self.config.keys_path)
        log.info("reloaded %d models and %d keys", len(self.registry), len(self.keys.list_records()))

    def _pooled_invoke(self, manifest, request):
        with self._worker_slots:
            return runtime.invoke(manifest, request)

    # ------------------------------------------------------------------
    # request pipeline
    # ------------------------------------------------------------------

    def handle(self, method: str, path: str, headers: dict, body: bytes) -> Response:
        """Full request → response mapping, transport-free for testability."""
        started = time.monotonic()
        path = path.split("?", 1)[0]
        key_id = ANONYMOUS_ID
        model = ""
        mode = method
        try:
            if method == "GET" and path == "/healthz":
                return self._ok({"status": "ok", "error_code": 0})
            if method == "GET" and path == "/models":
                caller = self.keys.authenticate(_auth_header(headers))
                key_id = caller.key_id
                listing = self.registry.list_models(
                    caller if isinstance(caller, ApiKeyRecord) else None
                )
                return self._ok(listing)
            if method != "POST":
                raise UnknownRoute(f"{method} {path}")
            route = parse_route(path)
            model, mode = route.model, route.mode.value
            caller = self.keys.authenticate(_auth_header(headers))
            key_id = caller.key_id
            envelope = parse_run_envelope(body)
            manifest = self.registry.resolve(route.model)
            authorize(caller, manifest)
            response = self._dispatch(route.mode, envelope, manifest, caller)
        except Exception as exc:
            response = self._error_response(exc)
            outcome = _outcome_for_status(response.status)
            self._log(key_id, model, str(mode), outcome, response, started)
            return response
        self._log(key_id, model, str(mode), "OK", response, started)
        return response

    def _dispatch(
        self,
        mode: RouteMode,
        envelope: wire.RunEnvelope,
        manifest,
        caller: Caller,
    ) -> Response:
        if mode is RouteMode.SYNC and envelope.func in (
            wire.FUNC_GET_DEFAULT_INPUT,
            wire.FUNC_MODEL_RUN,
        ):
            return self._run_sync(envelope, manifest, caller)
        if mode is RouteMode.ASYNC_SUBMIT and envelope.func == wire.FUNC_MODEL_RUN:
            return self._submit_async(envelope, manifest, caller)
        if mode is RouteMode.ASYNC_STATUS and envelope.func == wire.FUNC_GET_ASYNC_RESULTS:
            return self._poll_async(envelope, caller)
        raise EnvelopeError(
            f"func {envelope.func!r} is not valid on the {mode.value} route"
        )

    def _quota_identity(self, caller: Caller) -> tuple[str, QuotaPolicy]:
        if isinstance(caller, ApiKeyRecord):
            return caller.key_id, caller.quota
        return ANONYMOUS_ID, self.config.anonymous_quota

    def _run_sync(self, envelope, manifest, caller) -> Response:
        entity, policy = self._quota_identity(caller)
        reservation = self.ledger.reserve(entity, policy, manifest.limits.cpu_limit)
        usage: Optional[UsageReport] = None
        try:
            request = WorkerRequest(
                func=envelope.func,
                model_input=envelope.model_input,
                seed=envelope.seed,
            )
            response, usage = self._pooled_invoke(manifest, request)
        except WorkerError as exc:
            usage = exc.usage
            raise
        finally:
            reservation.settle(usage.cpu_seconds if usage else 0.0)
        if not response.ok:
            raise _PluginReported(
                response.error_code, response.error_message or "model rejected the input"
            )
        body = dict(response.result)
        body.setdefault("error_code", 0)
        return self._ok(body, cpu_seconds=usage.cpu_seconds)

    def _submit_async(self, envelope, manifest, caller) -> Response:
        if not manifest.supports_async:
            raise AsyncUnsupported(
                f"model {manifest.name!r} has no asynchronous implementation"
            )
        entity, policy = self._quota_identity(caller)
        reservation = self.ledger.reserve(entity, policy, manifest.limits.cpu_limit)
        try:
            ticket = self.jobs.submit(
                manifest,
                envelope.model_input,
                envelope.email_address,
                envelope.seed,
                key_id=entity,
                reservation=reservation,
            )
        except PrismError:
            reservation.settle(0.0)
            raise
        body: dict = {"token": ticket.token}
        if ticket.email_address is not None:
            body["email_address"] = ticket.email_address
        body["error_code"] = 0
        return self._ok(body)

    def _poll_async(self, envelope, caller) -> Response:
        entity, policy = self._quota_identity(caller)
        reservation = self.ledger.reserve(entity, policy, 0.0, concurrent=False)
        reservation.settle(0.0)
        view = self.jobs.poll(envelope.token)
        body: dict = {"status": view.status}
        if view.status_data is not None:
            body["status_data"] = view.status_data
        body["error_code"] = 0
        return self._ok(body)

    # ------------------------------------------------------------------
    # response building
    # ------------------------------------------------------------------

    @staticmethod
    def _ok(payload, cpu_seconds: float = 0.0) -> Response:
        return Response(
            status=200,
            body=wire.encode_boxed(payload).encode("utf-8"),
            cpu_seconds=cpu_seconds,
        )

    def _error_response(self, exc: Exception) -> Response:
        if isinstance(exc, _PluginReported):
            status, code = 400, exc.code
        else:
            for klass, status, code in _ERROR_TABLE:
                if isinstance(exc, klass):
                    break
            else:
                log.exception("unhandled error in request pipeline")
                status, code = 500, CODE_WORKER
        headers = {}
        if isinstance(exc, QuotaExceeded):
            headers["Retry-After"] = str(max(1, int(exc.retry_after + 0.999)))
        cpu = 0.0
        if isinstance(exc, WorkerError) and exc.usage is not None:
            cpu = exc.usage.cpu_seconds
        body = wire.encode_boxed({"error_code": code, "error_message": str(exc)})
        return Response(status=status, body=body.encode("utf-8"), headers=headers, cpu_seconds=cpu)

    def _log(self, key_id, model, mode, outcome, response: Response, started) -> None:
        self.request_log.log(
            RequestLogEntry(
                timestamp=self._clock(),
                key_id=key_id,
                model=model,
                mode=mode,
                outcome=outcome,
                cpu_seconds=response.cpu_seconds,
                wall_ms=(time.monotonic() - started) * 1000.0,
            ),
            durable=outcome in ("DENIED", "QUOTA"),
        )


def _auth_header(headers: dict) -> Optional[str]:
    for name, value in headers.items():
        if name.lower() == AUTH_HEADER:
            return value
    return None


def _outcome_for_status(status: int) -> str:
    if status in (401, 403):
        return "DENIED"
    if status == 429:
        return "QUOTA"
    return "ERROR" if status >= 400 else "OK"


# ----------------------------------------------------------------------
# HTTP plumbing
# ----------------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "prism-gateway"

    def _respond(self) -> None:
        service: PrismService = self.server.service  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            body = wire.encode_boxed(
                {"error_code": CODE_MALFORMED, "error_message": "request body too large"}
            ).encode("utf-8")
            result = Response(status=400, body=body)
        else:
            payload = self.rfile.read(length) if length else b""
            result = service.handle(self.command, self.path, dict(self.headers), payload)
        self.send_response(result.status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(result.body)))
        for name, value in result.headers.items():
            self.send_header(name, value)
        self.end_headers()
        self.wfile.write(result.body)

    do_GET = _respond
    do_POST = _respond

    def log_message(self, format: str, *args) -> None:
        log.debug("http: " + format, *args)


class PrismHTTPServer(ThreadingHTTPServer):
    daemon_threads = False
    block_on_close = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: PrismService):
        try:
            super().__init__(address, _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
        self.service = service

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(config: GatewayConfig) -> None:
    """Run the gateway until SIGTERM/SIGINT; drain in-flight work on the
    way out. SIGHUP reloads manifests and keys."""
    service = PrismService(config)
    server = PrismHTTPServer(config.host_port, service)
    service.start()

    stop_event = threading.Event()

    def _on_signal(signum, frame):
        log.info("signal %d: shutting down", signum)
        stop_event.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    signal.signal(signal.SIGHUP, lambda *_: service.reload())

    loop = threading.Thread(target=server.serve_forever, name="http-accept")
    loop.start()
    host, port = server.server_address[0], server.port
    log.info("listening on %s:%d with %d models", host, port, len(service.registry))
    print(f"prism-gateway listening on http://{host}:{port}", flush=True)
    try:
        stop_event.wait()
    finally:
        server.shutdown()
        server.server_close()
        loop.join(timeout=5)
        service.stop()


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="prism-gateway", description="Serve models behind the standard call protocol."
    )
    parser.add_argument(
        "--config",
        default=os.environ.get("PRISM_CONFIG", "prism.json"),
        help="path to the gateway config (or set PRISM_CONFIG)",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        config = load_config(args.config)
        serve(config)
    except (ConfigError, BindFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
