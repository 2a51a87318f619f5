"""Shared fixtures: plugin manifests and a live test server."""

from __future__ import annotations

import json
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import pytest

from prism_gateway.auth import KeyStore
from prism_gateway.gateway import GatewayConfig, PrismHTTPServer, PrismService
from prism_gateway.quota import QuotaPolicy
from prism_gateway.registry import ModelManifest
from prism_gateway.runtime import ResourceLimits

FAST_LIMITS = ResourceLimits(
    wall_timeout=20.0, cpu_limit=10.0, memory_limit=512 * 1024 * 1024
)


def make_manifest(module: str, *args: str, name: str = "m", **overrides) -> ModelManifest:
    command = (sys.executable, "-m", f"prism_gateway.demo_models.{module}", *args)
    defaults = dict(name=name, command=command, limits=FAST_LIMITS)
    defaults.update(overrides)
    return ModelManifest(**defaults)


@pytest.fixture
def accept_manifest() -> ModelManifest:
    return make_manifest("accept_demo", name="accept-demo")


@pytest.fixture
def epic_manifest() -> ModelManifest:
    return make_manifest("epic_demo", name="epic-demo", supports_async=True)


@pytest.fixture
def counter_manifest() -> ModelManifest:
    return make_manifest("test_plugins", "counter", name="counter")


# ----------------------------------------------------------------------
# live-server machinery
# ----------------------------------------------------------------------

DEFAULT_MODELS: dict[str, dict] = {
    "accept-demo": {
        "module": "accept_demo",
        "args": [],
        "supports_async": False,
        "limits": {"wall_timeout": 20.0, "cpu_limit": 10.0},
    },
    "epic-demo": {
        "module": "epic_demo",
        "args": [],
        "supports_async": True,
        "limits": {"wall_timeout": 30.0, "cpu_limit": 15.0},
    },
    "secret-demo": {
        "module": "epic_demo",
        "args": [],
        "supports_async": True,
        "visibility": "restricted",
        "limits": {"wall_timeout": 30.0, "cpu_limit": 15.0},
    },
    "counter": {
        "module": "test_plugins",
        "args": ["counter"],
        "limits": {"wall_timeout": 20.0, "cpu_limit": 10.0},
    },
    "echo": {
        "module": "test_plugins",
        "args": ["echo"],
        "limits": {"wall_timeout": 20.0, "cpu_limit": 10.0},
    },
    "sleeper": {
        "module": "test_plugins",
        "args": ["sleeper"],
        "limits": {"wall_timeout": 0.4, "cpu_limit": 5.0},
    },
    "hog": {
        "module": "test_plugins",
        "args": ["hog"],
        "limits": {"wall_timeout": 20.0, "cpu_limit": 15.0, "memory_limit": 268435456},
    },
    "writer": {
        "module": "test_plugins",
        "args": ["writer"],
        "limits": {"wall_timeout": 20.0, "cpu_limit": 10.0},
    },
    "burn": {
        "module": "test_plugins",
        "args": ["burn", "0.4"],
        "limits": {"wall_timeout": 20.0, "cpu_limit": 0.5},
    },
}


def write_model_dir(root: Path, models: Optional[dict] = None) -> Path:
    models_dir = root / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    for name, spec in (models or DEFAULT_MODELS).items():
        manifest = {
            "name": name,
            "version": "0.1.0",
            "command": [sys.executable, "-m", f"prism_gateway.demo_models.{spec['module']}"]
            + list(spec.get("args", [])),
            "supports_async": spec.get("supports_async", False),
            "visibility": spec.get("visibility", "public"),
            "limits": spec.get("limits", {}),
        }
        (models_dir / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=2))
    return models_dir


@dataclass
class ServerHandle:
    url: str
    service: PrismService
    server: PrismHTTPServer
    root: Path
    keystore: KeyStore

    def create_key(self, owner: str = "tester", acl=frozenset(), quota: Optional[QuotaPolicy] = None) -> str:
        _, plaintext = self.keystore.create_key(owner, acl=acl, quota=quota)
        self.service.keys = KeyStore(self.keystore.path)
        return plaintext


@dataclass
class ServerFactory:
    root: Path
    _handles: list[ServerHandle] = field(default_factory=list)

    def start(
        self,
        models: Optional[dict] = None,
        anonymous_quota: Optional[QuotaPolicy] = None,
        pool_size: int = 4,
        clock=None,
        queue_depth: int = 1000,
        retention: float = 24 * 3600.0,
    ) -> ServerHandle:
        run_dir = self.root / f"srv{len(self._handles)}"
        run_dir.mkdir(parents=True, exist_ok=True)
        models_dir = write_model_dir(run_dir, models)
        config = GatewayConfig(
            bind_address="127.0.0.1:0",
            models_dir=str(models_dir),
            keys_path=str(run_dir / "keys.json"),
            jobs_path=str(run_dir / "jobs.jsonl"),
            log_path=str(run_dir / "requests.jsonl"),
            anonymous_quota=anonymous_quota
            or QuotaPolicy(cpu_seconds_per_window=600.0, window=60.0, max_concurrent=64),
            pool_size=pool_size,
            retention=retention,
            queue_depth=queue_depth,
        )
        service = PrismService(config, clock=clock) if clock else PrismService(config)
        server = PrismHTTPServer(config.host_port, service)
        service.start()
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        handle = ServerHandle(
            url=f"http://127.0.0.1:{server.port}",
            service=service,
            server=server,
            root=run_dir,
            keystore=KeyStore(config.keys_path),
        )
        self._handles.append(handle)
        return handle

    def stop_all(self) -> None:
        for handle in self._handles:
            handle.server.shutdown()
            handle.server.server_close()
            handle.service.stop()
        self._handles.clear()


@pytest.fixture
def server_factory(tmp_path):
    factory = ServerFactory(root=tmp_path)
    yield factory
    factory.stop_all()


@pytest.fixture
def live_server(server_factory) -> ServerHandle:
    return server_factory.start()
