"""End-to-end HTTP tests against a live in-process gateway."""

from __future__ import annotations

import re
import threading
import time

import pytest
import requests

from prism_gateway import wire
from prism_gateway.gateway import ConfigError, GatewayConfig, PrismService
from prism_gateway.quota import QuotaPolicy

AUTH = "x-prism-auth-user"


def post(url, path, body: dict, key: str | None = None) -> requests.Response:
    headers = {"Content-Type": "application/json"}
    if key is not None:
        headers[AUTH] = key
    return requests.post(
        url + path, data=wire.encode_boxed_object(body).encode("utf-8"), headers=headers, timeout=60
    )


def run_body(**extra) -> dict:
    body = {"func": "prism_model_run"}
    body.update(extra)
    return body


def decoded(response: requests.Response):
    return wire.decode_boxed(response.content)


def poll_until_done(url, model, token, key=None, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        r = post(url, f"/route/{model}/async/status", {"func": "prism_get_async_results", "token": token}, key)
        assert r.status_code == 200, r.text
        view = decoded(r)
        if view["status"] in ("[COMPLETED]", "[FAILED]"):
            return view
        time.sleep(0.02)
    raise AssertionError("job did not finish in time")


class TestHealthAndListing:
    def test_healthz(self, live_server):
        r = requests.get(live_server.url + "/healthz", timeout=5)
        assert r.status_code == 200
        assert decoded(r)["error_code"] == 0

    def test_models_anonymous_sees_public_only(self, live_server):
        r = requests.get(live_server.url + "/models", timeout=5)
        names = {m["name"] for m in decoded(r)}
        assert "accept-demo" in names and "epic-demo" in names
        assert "secret-demo" not in names

    def test_models_with_acl_sees_restricted(self, live_server):
        key = live_server.create_key(acl={"secret-demo"})
        r = requests.get(live_server.url + "/models", headers={AUTH: key}, timeout=5)
        assert "secret-demo" in {m["name"] for m in decoded(r)}

    def test_models_entries_have_async_flag(self, live_server):
        r = requests.get(live_server.url + "/models", timeout=5)
        by_name = {m["name"]: m for m in decoded(r)}
        assert by_name["epic-demo"]["supports_async"] is True
        assert by_name["accept-demo"]["supports_async"] is False


class TestSyncCalls:
    def test_default_input_accept(self, live_server):
        r = post(live_server.url, "/route/accept-demo/run", {"func": "prism_get_default_input"})
        assert r.status_code == 200
        body = decoded(r)
        assert body["error_code"] == 0
        assert body["age"] == 70
        assert len(body) == 22  # 21 input fields + error_code

    def test_accept_defaults_give_exact_half(self, live_server):
        r = post(live_server.url, "/route/accept-demo/run", run_body())
        body = decoded(r)
        assert body["error_code"] == 0
        assert body["predicted_severe_exac_probability"] == 0.5

    def test_modified_input_changes_prediction(self, live_server):
        r = post(
            live_server.url,
            "/route/accept-demo/run",
            run_body(model_input={"LastYrSevExacCount": 3}),
        )
        body = decoded(r)
        assert body["predicted_severe_exac_probability"] > 0.5

    def test_domain_error_is_400_with_message(self, live_server):
        r = post(live_server.url, "/route/accept-demo/run", run_body(model_input={"age": 39}))
        assert r.status_code == 400
        body = decoded(r)
        assert body["error_code"] == 1
        assert "age" in body["error_message"]

    def test_seeded_runs_are_byte_identical(self, live_server):
        body = run_body(model_input={"agent.n_agents": 50}, seed=7)
        first = post(live_server.url, "/route/epic-demo/run", body)
        second = post(live_server.url, "/route/epic-demo/run", body)
        assert first.content == second.content

    def test_epic_default_input_includes_matrix(self, live_server):
        r = post(live_server.url, "/route/epic-demo/run", {"func": "prism_get_default_input"})
        body = decoded(r)
        assert body["agent.height_0_betas"] == wire.Matrix(
            ((1.8266, -0.1309, -0.0012, 2.31e-06, -2e-04),)
        )

    def test_counter_is_stateless_through_gateway(self, live_server):
        for _ in range(3):
            r = post(live_server.url, "/route/counter/run", run_body())
            assert decoded(r)["value"] == 1


class TestAsyncFlow:
    def test_submit_returns_token_email_error_code(self, live_server):
        r = post(
            live_server.url,
            "/route/epic-demo/async/run",
            run_body(email_address="a@b.c", model_input={"agent.n_agents": 20}),
        )
        assert r.status_code == 200
        assert re.fullmatch(
            r'\[\{"token":\["[a-z0-9]{10}"\],"email_address":\["a@b\.c"\],"error_code":\[0\]\}\]',
            r.text,
        )

    def test_submit_poll_complete(self, live_server):
        r = post(
            live_server.url,
            "/route/epic-demo/async/run",
            run_body(model_input={"agent.n_agents": 30}, seed=3),
        )
        token = decoded(r)["token"]
        view = poll_until_done(live_server.url, "epic-demo", token)
        assert view["status"] == "[COMPLETED]"
        assert view["status_data"]["n_agents"] == 30
        assert view["error_code"] == 0

    def test_async_on_sync_only_model_is_400(self, live_server):
        r = post(live_server.url, "/route/accept-demo/async/run", run_body())
        assert r.status_code == 400
        assert "asynchronous" in decoded(r)["error_message"]

    def test_unknown_token_404(self, live_server):
        r = post(
            live_server.url,
            "/route/epic-demo/async/status",
            {"func": "prism_get_async_results", "token": "zzzzzzzzzz"},
        )
        assert r.status_code == 404
        assert decoded(r)["error_code"] == 4

    def test_sync_async_same_seed_same_canonical_output(self, live_server):
        model_input = {"agent.n_agents": 40, "global_parameters.time_horizon": 6}
        sync = decoded(
            post(live_server.url, "/route/epic-demo/run", run_body(model_input=model_input, seed=11))
        )
        sync.pop("error_code")
        r = post(
            live_server.url,
            "/route/epic-demo/async/run",
            run_body(model_input=model_input, seed=11),
        )
        view = poll_until_done(live_server.url, "epic-demo", decoded(r)["token"])
        assert wire.encode_boxed(view["status_data"]) == wire.encode_boxed(sync)

    def test_restricted_model_poll_needs_authorization(self, live_server):
        key = live_server.create_key(acl={"secret-demo"})
        r = post(
            live_server.url,
            "/route/secret-demo/async/run",
            run_body(model_input={"agent.n_agents": 10}),
            key,
        )
        token = decoded(r)["token"]
        anon = post(
            live_server.url,
            "/route/secret-demo/async/status",
            {"func": "prism_get_async_results", "token": token},
        )
        assert anon.status_code == 403
        view = poll_until_done(live_server.url, "secret-demo", token, key=key)
        assert view["status"] in ("[COMPLETED]", "[QUEUED]", "[RUNNING]") or view["status_data"]


class TestAccessControlMatrix:
    CASES = [
        ("none", "epic-demo", 200),
        ("bad", "epic-demo", 401),
        ("no_acl", "epic-demo", 200),
        ("valid", "epic-demo", 200),
        ("none", "secret-demo", 403),
        ("bad", "secret-demo", 401),
        ("no_acl", "secret-demo", 403),
        ("valid", "secret-demo", 200),
    ]

    def test_matrix(self, live_server):
        keys = {
            "none": None,
            "bad": "pmk_definitely-not-a-key",
            "no_acl": live_server.create_key(owner="norights"),
            "valid": live_server.create_key(owner="insider", acl={"secret-demo"}),
        }
        body = run_body(model_input={"agent.n_agents": 5, "global_parameters.time_horizon": 1})
        for kind, model, expected in self.CASES:
            r = post(live_server.url, f"/route/{model}/run", body, keys[kind])
            assert r.status_code == expected, f"{kind} × {model}: got {r.status_code}"
            payload = decoded(r)
            assert "error_code" in payload


class TestErrorMapping:
    def test_unknown_route_404_code_4(self, live_server):
        r = post(live_server.url, "/route/epic-demo/nope", run_body())
        assert (r.status_code, decoded(r)["error_code"]) == (404, 4)

    def test_unknown_model_404(self, live_server):
        r = post(live_server.url, "/route/nosuch/run", run_body())
        assert (r.status_code, decoded(r)["error_code"]) == (404, 4)

    def test_invalid_model_name_404(self, live_server):
        r = post(live_server.url, "/route//run", run_body())
        assert r.status_code == 404

    def test_malformed_body_400_code_1(self, live_server):
        r = requests.post(
            live_server.url + "/route/epic-demo/run", data=b"{broken", timeout=10
        )
        assert (r.status_code, decoded(r)["error_code"]) == (400, 1)

    def test_unknown_func_400(self, live_server):
        r = post(live_server.url, "/route/epic-demo/run", {"func": "do_evil"})
        assert (r.status_code, decoded(r)["error_code"]) == (400, 1)

    def test_func_route_mismatch_400(self, live_server):
        r = post(live_server.url, "/route/epic-demo/async/run", {"func": "prism_get_default_input"})
        assert (r.status_code, decoded(r)["error_code"]) == (400, 1)

    def test_sleeper_408_code_6(self, live_server):
        r = post(live_server.url, "/route/sleeper/run", run_body())
        assert (r.status_code, decoded(r)["error_code"]) == (408, 6)

    def test_hog_500_and_gateway_survives(self, live_server):
        r = post(live_server.url, "/route/hog/run", run_body())
        assert (r.status_code, decoded(r)["error_code"]) == (500, 7)
        health = requests.get(live_server.url + "/healthz", timeout=5)
        assert health.status_code == 200

    def test_writer_outside_scratch_never_crashes_gateway(self, live_server):
        r = post(live_server.url, "/route/writer/run", run_body())
        assert r.status_code in (200, 500)
        assert requests.get(live_server.url + "/healthz", timeout=5).status_code == 200

    def test_queue_full_503_code_8(self, server_factory):
        handle = server_factory.start(queue_depth=0)
        r = post(handle.url, "/route/epic-demo/async/run", run_body())
        assert (r.status_code, decoded(r)["error_code"]) == (503, 8)

    def test_get_on_route_is_404(self, live_server):
        r = requests.get(live_server.url + "/route/epic-demo/run", timeout=5)
        assert r.status_code == 404

    def test_every_error_body_decodes_with_error_code(self, live_server):
        paths = [
            ("/route/nosuch/run", run_body()),
            ("/route/epic-demo/nope", run_body()),
            ("/route/accept-demo/async/run", run_body()),
        ]
        for path, body in paths:
            r = post(live_server.url, path, body)
            payload = decoded(r)
            assert payload["error_code"] != 0
            assert isinstance(payload["error_message"], str)


class FakeClock:
    def __init__(self, start=1_700_000_000.0):
        self.now = start
        self._lock = threading.Lock()

    def __call__(self):
        with self._lock:
            return self.now

    def advance(self, dt):
        with self._lock:
            self.now += dt


class TestQuotaOverHttp:
    def test_burn_until_429_then_mock_clock_readmits(self, server_factory):
        clock = FakeClock()
        handle = server_factory.start(
            anonymous_quota=QuotaPolicy(cpu_seconds_per_window=1.0, window=60.0, max_concurrent=8),
            clock=clock,
        )
        first = post(handle.url, "/route/burn/run", run_body())
        assert first.status_code == 200
        second = post(handle.url, "/route/burn/run", run_body())
        assert second.status_code == 200
        third = post(handle.url, "/route/burn/run", run_body())
        assert third.status_code == 429
        assert decoded(third)["error_code"] == 5
        assert int(third.headers["Retry-After"]) >= 1

        clock.advance(61.0)
        fourth = post(handle.url, "/route/burn/run", run_body())
        assert fourth.status_code == 200

    def test_max_concurrent_overlap_429(self, server_factory):
        handle = server_factory.start()
        key = handle.create_key(
            quota=QuotaPolicy(cpu_seconds_per_window=600.0, window=60.0, max_concurrent=1)
        )
        results = {}

        def call(tag):
            results[tag] = post(handle.url, "/route/burn/run", run_body(), key).status_code

        first = threading.Thread(target=call, args=("first",))
        first.start()
        time.sleep(0.15)
        call("second")
        first.join()
        assert results["first"] == 200
        assert results["second"] == 429

    def test_throughput_pool_size_concurrent_calls_all_200(self, server_factory):
        handle = server_factory.start(pool_size=4)
        statuses = []
        lock = threading.Lock()

        def call():
            r = post(handle.url, "/route/echo/run", run_body(model_input={"x": 1}))
            with lock:
                statuses.append(r.status_code)

        threads = [threading.Thread(target=call) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert statuses == [200, 200, 200, 200]


class TestRequestLogging:
    def test_outcomes_logged(self, live_server, tmp_path):
        post(live_server.url, "/route/accept-demo/run", run_body())
        post(live_server.url, "/route/secret-demo/run", run_body())
        post(live_server.url, "/route/nosuch/run", run_body())
        lines = (live_server.root / "requests.jsonl").read_text().splitlines()
        import json as _json

        outcomes = [_json.loads(l)["outcome"] for l in lines]
        assert "OK" in outcomes and "DENIED" in outcomes and "ERROR" in outcomes

    def test_no_plaintext_key_in_logs_or_store(self, live_server):
        key = live_server.create_key(acl={"secret-demo"})
        post(live_server.url, "/route/secret-demo/run", run_body(model_input={"agent.n_agents": 5}), key)
        for name in ("requests.jsonl", "keys.json"):
            contents = (live_server.root / name).read_text()
            assert key not in contents


class TestConfig:
    def test_bad_models_dir_is_config_error(self, tmp_path):
        config = GatewayConfig(models_dir=str(tmp_path / "missing"), keys_path=str(tmp_path / "k"),
                               jobs_path=str(tmp_path / "j"), log_path=str(tmp_path / "l"))
        with pytest.raises(ConfigError):
            PrismService(config)

    def test_paths_must_be_distinct(self, tmp_path):
        with pytest.raises(ConfigError):
            GatewayConfig(keys_path="same", jobs_path="same", log_path="other")

    def test_pool_size_must_be_positive(self):
        with pytest.raises(ConfigError):
            GatewayConfig(pool_size=0)

    def test_reload_picks_up_new_manifest(self, server_factory):
        import json as _json
        import sys as _sys

        handle = server_factory.start()
        extra = {
            "name": "late-arrival",
            "command": [_sys.executable, "-m", "prism_gateway.demo_models.test_plugins", "echo"],
        }
        (handle.root / "models" / "late-arrival.manifest.json").write_text(_json.dumps(extra))
        handle.service.reload()
        r = requests.get(handle.url + "/models", timeout=5)
        assert "late-arrival" in {m["name"] for m in decoded(r)}
