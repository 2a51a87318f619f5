"""Asynchronous job queue: tokens, durable journal, worker pool, expiry.

A submission is appended to an append-only JSON-lines journal *before* its
ticket is returned, so a crash between submit and completion loses nothing:
on startup the journal is replayed, queued jobs are re-queued, and jobs
that were mid-run are run again. Results live in the journal too and are
purged once a retention period after finishing.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import secrets
import string
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import wire
from .errors import PrismError
from .quota import Reservation
from .registry import ModelManifest
from .runtime import UsageReport, WorkerError, WorkerRequest, WorkerResponse

log = logging.getLogger(__name__)

STATE_QUEUED = "[QUEUED]"
STATE_RUNNING = "[RUNNING]"
STATE_COMPLETED = "[COMPLETED]"
STATE_FAILED = "[FAILED]"
STATE_EXPIRED = "[EXPIRED]"
TERMINAL_STATES = (STATE_COMPLETED, STATE_FAILED)

TOKEN_RE = re.compile(r"[a-z0-9]{10}\Z")
_TOKEN_ALPHABET = string.ascii_lowercase + string.digits


class AsyncUnsupported(PrismError):
    """The model has no asynchronous implementation."""


class QueueFull(PrismError):
    """The queue is at its configured depth cap."""


class UnknownToken(PrismError):
    """Token was never issued, or its job expired and was purged."""


@dataclass(frozen=True)
class JobTicket:
    token: str
    model: str
    submitted_at: float
    email_address: Optional[str] = None


@dataclass
class JobRecord:
    ticket: JobTicket
    state: str
    input: Optional[dict]
    seed: int
    key_id: str
    seq: int
    result: Optional[dict] = None
    error: Optional[str] = None
    finished_at: Optional[float] = None


@dataclass(frozen=True)
class JobStatusView:
    status: str
    status_data: Optional[dict] = None


def generate_token(rng: random.Random) -> str:
    """Ten lowercase alphanumeric characters, uniform."""
    return "".join(rng.choice(_TOKEN_ALPHABET) for _ in range(10))


class JobManager:
    """Owns the queue, the journal, and a bounded pool of drainer threads."""

    def __init__(
        self,
        journal_path: str | Path,
        outbox_path: str | Path,
        resolve: Callable[[str], ModelManifest],
        invoke: Callable[[ModelManifest, WorkerRequest], tuple[WorkerResponse, UsageReport]],
        pool_size: int = 2,
        queue_depth: int = 1000,
        retention_seconds: float = 24 * 3600.0,
        clock: Callable[[], float] = time.time,
        rng: Optional[random.Random] = None,
        on_charge: Optional[Callable[[str, float], None]] = None,
        expiry_interval: float = 60.0,
    ):
        self.journal_path = Path(journal_path)
        self.outbox_path = Path(outbox_path)
        self._resolve = resolve
        self._invoke = invoke
        self.pool_size = max(1, pool_size)
        self.queue_depth = queue_depth
        self.retention_seconds = retention_seconds
        self._clock = clock
        self._rng = rng or random.Random(secrets.randbits(64))
        self._on_charge = on_charge
        self._expiry_interval = expiry_interval

        self._lock = threading.Condition()
        self._jobs: dict[str, JobRecord] = {}
        self._queue: deque[str] = deque()
        self._reservations: dict[str, Reservation] = {}
        self._seq = 0
        self._stopping = False
        self._threads: list[threading.Thread] = []

        self.journal_path.parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._journal = open(self.journal_path, "a", encoding="utf-8")
        self._journal_lock = threading.Lock()

    # ------------------------------------------------------------------
    # journal
    # ------------------------------------------------------------------

    def _append(self, event: dict) -> None:
        line = json.dumps(event, separators=(",", ":"))
        with self._journal_lock:
            try:
                self._journal.write(line + "\n")
                self._journal.flush()
                os.fsync(self._journal.fileno())
            except ValueError:
                log.error("journal closed; dropping event %s", event.get("event"))

    def _recover(self) -> None:
        """Replay the journal: rebuild records, re-queue unfinished work,
        drop expired jobs (their purge is the compaction)."""
        if not self.journal_path.exists():
            return
        for line in self.journal_path.read_text("utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError:
                log.warning("skipping truncated journal line")
                continue
            self._apply_event(event)
        for token in [t for t, r in self._jobs.items() if r.state == STATE_EXPIRED]:
            del self._jobs[token]
        pending = [
            r for r in self._jobs.values() if r.state in (STATE_QUEUED, STATE_RUNNING)
        ]
        pending.sort(key=lambda r: (r.ticket.submitted_at, r.seq))
        for record in pending:
            record.state = STATE_QUEUED
            self._queue.append(record.ticket.token)

    def _apply_event(self, event: dict) -> None:
        kind = event.get("event")
        token = event.get("token")
        if kind == "submitted":
            self._seq += 1
            ticket = JobTicket(
                token=token,
                model=event.get("model", ""),
                submitted_at=event.get("submitted_at", 0.0),
                email_address=event.get("email_address"),
            )
            raw_input = event.get("input")
            self._jobs[token] = JobRecord(
                ticket=ticket,
                state=STATE_QUEUED,
                input=wire.from_plain(raw_input) if raw_input is not None else None,
                seed=event.get("seed", 0),
                key_id=event.get("key_id", "anonymous"),
                seq=self._seq,
            )
            return
        record = self._jobs.get(token)
        if record is None:
            return
        if kind == "running":
            record.state = STATE_RUNNING
        elif kind == "completed":
            record.state = STATE_COMPLETED
            raw = event.get("result")
            record.result = wire.from_plain(raw) if raw is not None else {}
            record.finished_at = event.get("finished_at")
        elif kind == "failed":
            record.state = STATE_FAILED
            record.error = event.get("error")
            record.finished_at = event.get("finished_at")
        elif kind == "expired":
            record.state = STATE_EXPIRED
            record.result = None

    def compact(self) -> None:
        """Rewrite the journal to the minimal events for live jobs."""
        with self._lock:
            records = sorted(self._jobs.values(), key=lambda r: r.seq)
            lines = []
            for r in records:
                if r.state == STATE_EXPIRED:
                    continue
                lines.append(self._submitted_event(r))
                if r.state == STATE_COMPLETED:
                    lines.append(
                        {
                            "event": "completed",
                            "token": r.ticket.token,
                            "finished_at": r.finished_at,
                            "result": wire.to_plain(r.result) if r.result is not None else {},
                        }
                    )
                elif r.state == STATE_FAILED:
                    lines.append(
                        {
                            "event": "failed",
                            "token": r.ticket.token,
                            "finished_at": r.finished_at,
                            "error": r.error,
                        }
                    )
        with self._journal_lock:
            tmp = self.journal_path.with_suffix(".compacting")
            with open(tmp, "w", encoding="utf-8") as fh:
                for event in lines:
                    fh.write(json.dumps(event, separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._journal.close()
            os.replace(tmp, self.journal_path)
            self._journal = open(self.journal_path, "a", encoding="utf-8")

    def _submitted_event(self, record: JobRecord) -> dict:
        return {
            "event": "submitted",
            "token": record.ticket.token,
            "model": record.ticket.model,
            "submitted_at": record.ticket.submitted_at,
            "email_address": record.ticket.email_address,
            "seed": record.seed,
            "key_id": record.key_id,
            "input": wire.to_plain(record.input) if record.input is not None else None,
        }

    # ------------------------------------------------------------------
    # public operations
    # ------------------------------------------------------------------

    def submit(
        self,
        manifest: ModelManifest,
        model_input: Optional[dict],
        email_address: Optional[str],
        seed: Optional[int],
        key_id: str = "anonymous",
        reservation: Optional[Reservation] = None,
    ) -> JobTicket:
        """Persist a job in the queued state and hand back its ticket."""
        if not manifest.supports_async:
            raise AsyncUnsupported(
                f"model {manifest.name!r} has no asynchronous implementation"
            )
        with self._lock:
            if len(self._queue) >= self.queue_depth:
                raise QueueFull(f"queue is at its cap of {self.queue_depth} jobs")
            token = generate_token(self._rng)
            while token in self._jobs:
                token = generate_token(self._rng)
            self._seq += 1
            ticket = JobTicket(
                token=token,
                model=manifest.name,
                submitted_at=self._clock(),
                email_address=email_address,
            )
            record = JobRecord(
                ticket=ticket,
                state=STATE_QUEUED,
                input=model_input,
                seed=seed if seed is not None else self._rng.getrandbits(53),
                key_id=key_id,
                seq=self._seq,
            )
            self._jobs[token] = record
            if reservation is not None:
                self._reservations[token] = reservation
            self._append(self._submitted_event(record))
            self._queue.append(token)
            self._lock.notify()
        return ticket

    def poll(self, token: str) -> JobStatusView:
        """Idempotent status lookup; completed jobs keep their result until
        expiry."""
        with self._lock:
            record = self._jobs.get(token)
            if record is None:
                raise UnknownToken(f"unknown token {token!r}")
            data = None
            if record.state == STATE_COMPLETED and record.result is not None:
                data = dict(record.result)
            return JobStatusView(status=record.state, status_data=data)

    def run_next(self, timeout: Optional[float] = None) -> bool:
        """Drain one job if available; returns whether one was processed."""
        with self._lock:
            if not self._queue and timeout:
                self._lock.wait(timeout)
            if not self._queue:
                return False
            token = self._queue.popleft()
            record = self._jobs[token]
            record.state = STATE_RUNNING
        self._append({"event": "running", "token": token, "ts": self._clock()})
        self._execute(record)
        return True

    def _execute(self, record: JobRecord) -> None:
        token = record.ticket.token
        cpu = 0.0
        result: Optional[dict] = None
        error: Optional[str] = None
        try:
            manifest = self._resolve(record.ticket.model)
            request = WorkerRequest(
                func=wire.FUNC_MODEL_RUN, model_input=record.input, seed=record.seed
            )
            response, usage = self._invoke(manifest, request)
            cpu = usage.cpu_seconds
            if response.ok:
                result = response.result
            else:
                error = response.error_message or f"model error {response.error_code}"
        except WorkerError as exc:
            error = str(exc)
            if exc.usage is not None:
                cpu = exc.usage.cpu_seconds
        except PrismError as exc:
            error = str(exc)
        except Exception as exc:  # a drainer must never die
            log.exception("unexpected failure running job %s", token)
            error = f"internal error: {exc}"

        finished_at = self._clock()
        with self._lock:
            if error is None:
                record.state = STATE_COMPLETED
                record.result = result
            else:
                record.state = STATE_FAILED
                record.error = error
            record.finished_at = finished_at
            reservation = self._reservations.pop(token, None)
        if error is None:
            self._append(
                {
                    "event": "completed",
                    "token": token,
                    "finished_at": finished_at,
                    "result": wire.to_plain(result) if result is not None else {},
                }
            )
        else:
            self._append(
                {
                    "event": "failed",
                    "token": token,
                    "finished_at": finished_at,
                    "error": error,
                }
            )
        if reservation is not None:
            reservation.settle(cpu)
        elif self._on_charge is not None:
            self._on_charge(record.key_id, cpu)
        self.notify(record)

    def notify(self, record: JobRecord) -> None:
        """Append a notification stub to the outbox; delivery is someone
        else's job."""
        if record.ticket.email_address is None:
            return
        if record.state not in (STATE_COMPLETED, STATE_FAILED):
            return
        line = json.dumps(
            {
                "email": record.ticket.email_address,
                "token": record.ticket.token,
                "status": record.state,
                "timestamp": self._clock(),
            },
            separators=(",", ":"),
        )
        try:
            self.outbox_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.outbox_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except OSError as exc:
            log.error("outbox unavailable: %s", exc)

    def expire_jobs(self, now: Optional[float] = None) -> int:
        """Purge results of terminal jobs older than the retention period."""
        now = self._clock() if now is None else now
        cutoff = now - self.retention_seconds
        expired: list[str] = []
        with self._lock:
            for token, record in self._jobs.items():
                if record.state in TERMINAL_STATES and (
                    record.finished_at is not None and record.finished_at < cutoff
                ):
                    record.state = STATE_EXPIRED
                    record.result = None
                    expired.append(token)
        for token in expired:
            self._append({"event": "expired", "token": token, "ts": now})
        return len(expired)

    # ------------------------------------------------------------------
    # pool lifecycle
    # ------------------------------------------------------------------

    def start(self) -> None:
        self._stopping = False
        for i in range(self.pool_size):
            t = threading.Thread(target=self._drain_loop, daemon=True, name=f"job-drainer-{i}")
            t.start()
            self._threads.append(t)
        housekeeper = threading.Thread(target=self._expiry_loop, daemon=True, name="job-expiry")
        housekeeper.start()
        self._threads.append(housekeeper)

    def stop(self, join_timeout: float = 5.0) -> None:
        with self._lock:
            self._stopping = True
            self._lock.notify_all()
        for t in self._threads:
            t.join(timeout=join_timeout)
        stuck = [t for t in self._threads if t.is_alive()]
        self._threads = stuck
        if not stuck:
            with self._journal_lock:
                try:
                    self._journal.flush()
                except ValueError:
                    pass

    def _drain_loop(self) -> None:
        while True:
            with self._lock:
                while not self._queue and not self._stopping:
                    self._lock.wait(timeout=0.5)
                if self._stopping:
                    return
                token = self._queue.popleft()
                record = self._jobs[token]
                record.state = STATE_RUNNING
            self._append({"event": "running", "token": token, "ts": self._clock()})
            self._execute(record)

    def _expiry_loop(self) -> None:
        while True:
            with self._lock:
                if self._stopping:
                    return
                self._lock.wait(timeout=self._expiry_interval)
                if self._stopping:
                    return
            try:
                self.expire_jobs()
            except Exception:
                log.exception("expiry sweep failed")

    def queue_length(self) -> int:
        with self._lock:
            return len(self._queue)

    def live_tokens(self) -> set[str]:
        with self._lock:
            return set(self._jobs)
