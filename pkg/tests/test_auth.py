"""Key store, authorization, and request-log tests."""

from __future__ import annotations

import json

import pytest

from prism_gateway.auth import (
    ACL_ALL,
    ANONYMOUS,
    Forbidden,
    InvalidKey,
    KeyStore,
    RequestLog,
    RequestLogEntry,
    UnknownKeyId,
    authorize,
)
from prism_gateway.quota import QuotaPolicy
from prism_gateway.registry import ModelManifest


def make_store(tmp_path) -> KeyStore:
    return KeyStore(tmp_path / "keys.json")


PUBLIC = ModelManifest(name="pub", command=("true",))
RESTRICTED = ModelManifest(name="sec", command=("true",), visibility="restricted")


class TestAuthenticate:
    def test_valid_key_resolves_to_record(self, tmp_path):
        store = make_store(tmp_path)
        record, plaintext = store.create_key("alice", acl={"sec"})
        assert plaintext.startswith("pmk_")
        caller = store.authenticate(plaintext)
        assert caller.key_id == record.key_id
        assert caller.owner == "alice"

    def test_absent_header_is_anonymous(self, tmp_path):
        store = make_store(tmp_path)
        assert store.authenticate(None) is ANONYMOUS

    def test_unknown_key_rejected(self, tmp_path):
        store = make_store(tmp_path)
        store.create_key("alice")
        with pytest.raises(InvalidKey):
            store.authenticate("pmk_not-a-real-key")

    def test_disabled_key_authenticates_as_unknown(self, tmp_path):
        store = make_store(tmp_path)
        record, plaintext = store.create_key("alice")
        store.revoke_key(record.key_id)
        with pytest.raises(InvalidKey):
            store.authenticate(plaintext)

    def test_empty_header_rejected(self, tmp_path):
        store = make_store(tmp_path)
        with pytest.raises(InvalidKey):
            store.authenticate("   ")


class TestAuthorize:
    def test_anonymous_on_public_allowed(self):
        authorize(ANONYMOUS, PUBLIC)

    def test_anonymous_on_restricted_forbidden(self):
        with pytest.raises(Forbidden):
            authorize(ANONYMOUS, RESTRICTED)

    def test_acl_all_allows_everything(self, tmp_path):
        store = make_store(tmp_path)
        record, _ = store.create_key("root", acl=ACL_ALL)
        authorize(record, RESTRICTED)
        authorize(record, PUBLIC)

    def test_wrong_acl_forbidden(self, tmp_path):
        store = make_store(tmp_path)
        record, _ = store.create_key("alice", acl={"epic"})
        with pytest.raises(Forbidden):
            authorize(record, RESTRICTED)

    def test_enlarging_acl_is_monotone(self, tmp_path):
        store = make_store(tmp_path)
        record, _ = store.create_key("alice", acl={"pub"})
        authorize(record, PUBLIC)
        store.set_acl(record.key_id, {"pub", "sec"})
        bigger = store.get(record.key_id)
        authorize(bigger, PUBLIC)
        authorize(bigger, RESTRICTED)


class TestStorePersistence:
    def test_no_plaintext_in_store_file(self, tmp_path):
        store = make_store(tmp_path)
        _, plaintext = store.create_key("alice", acl={"sec"})
        contents = (tmp_path / "keys.json").read_text()
        assert plaintext not in contents
        assert "pmk_" not in contents

    def test_reload_round_trips(self, tmp_path):
        store = make_store(tmp_path)
        record, plaintext = store.create_key(
            "alice",
            acl={"a", "b"},
            quota=QuotaPolicy(cpu_seconds_per_window=5.0, window=30.0, max_concurrent=2),
        )
        reloaded = KeyStore(tmp_path / "keys.json")
        caller = reloaded.authenticate(plaintext)
        assert caller.acl == frozenset({"a", "b"})
        assert caller.quota.cpu_seconds_per_window == 5.0

    def test_set_quota_persists(self, tmp_path):
        store = make_store(tmp_path)
        record, _ = store.create_key("alice")
        store.set_quota(
            record.key_id, QuotaPolicy(cpu_seconds_per_window=0.5, window=60.0, max_concurrent=1)
        )
        reloaded = KeyStore(tmp_path / "keys.json")
        assert reloaded.get(record.key_id).quota.cpu_seconds_per_window == 0.5

    def test_unknown_key_id(self, tmp_path):
        store = make_store(tmp_path)
        with pytest.raises(UnknownKeyId):
            store.revoke_key("k_missing")


class TestRequestLog:
    def test_three_outcomes_three_lines(self, tmp_path):
        log = RequestLog(tmp_path / "req.jsonl")
        for outcome in ("OK", "DENIED", "QUOTA"):
            log.log(
                RequestLogEntry(
                    timestamp=1.0,
                    key_id="k",
                    model="m",
                    mode="SYNC",
                    outcome=outcome,
                ),
                durable=outcome != "OK",
            )
        lines = (tmp_path / "req.jsonl").read_text().splitlines()
        assert [json.loads(l)["outcome"] for l in lines] == ["OK", "DENIED", "QUOTA"]

    def test_timestamps_monotone(self, tmp_path):
        log = RequestLog(tmp_path / "req.jsonl")
        log.log(RequestLogEntry(10.0, "k", "m", "SYNC", "OK"))
        log.log(RequestLogEntry(5.0, "k", "m", "SYNC", "OK"))
        lines = [json.loads(l) for l in (tmp_path / "req.jsonl").read_text().splitlines()]
        assert lines[1]["ts"] >= lines[0]["ts"]

    def test_broken_path_degrades_to_stderr(self, tmp_path, capsys):
        log = RequestLog("/proc/definitely/not/writable/log.jsonl")
        log.log(RequestLogEntry(1.0, "k", "m", "SYNC", "OK"))
        assert "request log unavailable" in capsys.readouterr().err
