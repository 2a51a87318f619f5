"""API-key store, authorization, and the request log.

Keys are presented in the ``x-prism-auth-user`` header and stored only as
SHA-256 digests; the plaintext exists exactly once, on creation. Absent
header means the anonymous caller, who may still use public models under
the deployment's anonymous quota.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import secrets
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

from .errors import PrismError
from .quota import QuotaPolicy
from .registry import ModelManifest

AUTH_HEADER = "x-prism-auth-user"
KEY_PREFIX = "pmk_"
ACL_ALL = "ALL"
ANONYMOUS_ID = "anonymous"


class InvalidKey(PrismError):
    """Presented key is unknown, malformed, or disabled."""


class Forbidden(PrismError):
    """Authenticated caller may not use this model."""


class UnknownKeyId(PrismError):
    """Admin operation names a key_id that does not exist."""


@dataclass(frozen=True)
class Anonymous:
    """The caller without a key."""

    key_id: str = ANONYMOUS_ID

    def acl_allows(self, model: str) -> bool:
        return False


ANONYMOUS = Anonymous()


@dataclass(frozen=True)
class ApiKeyRecord:
    key_id: str
    key_hash: str
    owner: str
    acl: Union[frozenset, str] = frozenset()
    quota: QuotaPolicy = field(default_factory=QuotaPolicy)
    enabled: bool = True
    created_at: float = 0.0

    def acl_allows(self, model: str) -> bool:
        if self.acl == ACL_ALL:
            return True
        return model in self.acl


Caller = Union[ApiKeyRecord, Anonymous]


def hash_key(plaintext: str) -> str:
    return "sha256:" + hashlib.sha256(plaintext.encode("utf-8")).hexdigest()


def generate_key() -> str:
    return KEY_PREFIX + secrets.token_urlsafe(32)


def authorize(caller: Caller, manifest: ModelManifest) -> None:
    """Public models admit everyone; restricted ones need an ACL match."""
    if manifest.is_public:
        return
    if caller.acl_allows(manifest.name):
        return
    raise Forbidden(f"caller {caller.key_id!r} may not access model {manifest.name!r}")


class KeyStore:
    """keys.json persistence plus authentication. Mutations rewrite the
    file atomically and are serialized through one lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, ApiKeyRecord] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        data = json.loads(self.path.read_text("utf-8"))
        records = {}
        for item in data.get("keys", []):
            acl = item.get("acl", [])
            record = ApiKeyRecord(
                key_id=item["key_id"],
                key_hash=item["key_hash"],
                owner=item.get("owner", ""),
                acl=ACL_ALL if acl == ACL_ALL else frozenset(acl),
                quota=QuotaPolicy(**item.get("quota", {})),
                enabled=item.get("enabled", True),
                created_at=item.get("created_at", 0.0),
            )
            records[record.key_id] = record
        self._records = records

    def _save_locked(self) -> None:
        payload = {
            "keys": [
                {
                    "key_id": r.key_id,
                    "key_hash": r.key_hash,
                    "owner": r.owner,
                    "acl": ACL_ALL if r.acl == ACL_ALL else sorted(r.acl),
                    "quota": {
                        "cpu_seconds_per_window": r.quota.cpu_seconds_per_window,
                        "window": r.quota.window,
                        "max_concurrent": r.quota.max_concurrent,
                    },
                    "enabled": r.enabled,
                    "created_at": r.created_at,
                }
                for r in self._records.values()
            ]
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".keys-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2)
                fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    def authenticate(self, header_value: Optional[str]) -> Caller:
        """Resolve a header value to its caller, or Anonymous when absent."""
        if header_value is None:
            return ANONYMOUS
        presented = header_value.strip()
        if not presented:
            raise InvalidKey("empty api key")
        digest = hash_key(presented)
        with self._lock:
            match: Optional[ApiKeyRecord] = None
            for record in self._records.values():
                if hmac.compare_digest(record.key_hash, digest):
                    match = record
        if match is None or not match.enabled:
            raise InvalidKey("unknown or disabled api key")
        return match

    def get(self, key_id: str) -> ApiKeyRecord:
        with self._lock:
            try:
                return self._records[key_id]
            except KeyError:
                raise UnknownKeyId(f"no key with id {key_id!r}") from None

    def list_records(self) -> list[ApiKeyRecord]:
        with self._lock:
            return list(self._records.values())

    def create_key(
        self,
        owner: str,
        acl: Union[frozenset, str] = frozenset(),
        quota: Optional[QuotaPolicy] = None,
    ) -> tuple[ApiKeyRecord, str]:
        """Mint a key; the returned plaintext is shown once and never stored."""
        plaintext = generate_key()
        record = ApiKeyRecord(
            key_id="k_" + secrets.token_hex(6),
            key_hash=hash_key(plaintext),
            owner=owner,
            acl=ACL_ALL if acl == ACL_ALL else frozenset(acl),
            quota=quota or QuotaPolicy(),
            enabled=True,
            created_at=time.time(),
        )
        with self._lock:
            self._records[record.key_id] = record
            self._save_locked()
        return record, plaintext

    def revoke_key(self, key_id: str) -> None:
        self._mutate(key_id, enabled=False)

    def set_acl(self, key_id: str, acl: Union[frozenset, str]) -> None:
        self._mutate(key_id, acl=ACL_ALL if acl == ACL_ALL else frozenset(acl))

    def set_quota(self, key_id: str, quota: QuotaPolicy) -> None:
        self._mutate(key_id, quota=quota)

    def _mutate(self, key_id: str, **changes) -> None:
        with self._lock:
            if key_id not in self._records:
                raise UnknownKeyId(f"no key with id {key_id!r}")
            self._records[key_id] = replace(self._records[key_id], **changes)
            self._save_locked()


@dataclass(frozen=True)
class RequestLogEntry:
    timestamp: float
    key_id: str
    model: str
    mode: str
    outcome: str  # OK | DENIED | QUOTA | ERROR
    cpu_seconds: float = 0.0
    wall_ms: float = 0.0


class RequestLog:
    """Append-only JSON-lines request log with monotone timestamps.

    Denials are fsynced before the HTTP response goes out; everything else
    is flushed. A broken log degrades to stderr and never fails a request.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._last_ts = 0.0

    def log(self, entry: RequestLogEntry, durable: bool = False) -> None:
        with self._lock:
            ts = max(entry.timestamp, self._last_ts)
            self._last_ts = ts
            line = json.dumps(
                {
                    "ts": ts,
                    "key_id": entry.key_id,
                    "model": entry.model,
                    "mode": entry.mode,
                    "outcome": entry.outcome,
                    "cpu_seconds": round(entry.cpu_seconds, 6),
                    "wall_ms": round(entry.wall_ms, 3),
                },
                separators=(",", ":"),
            )
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
                    if durable:
                        os.fsync(fh.fileno())
            except OSError as exc:
                print(f"request log unavailable ({exc}): {line}", file=sys.stderr)
