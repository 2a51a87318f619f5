"""Model manifests: loading, lookup, and the public model listing.

A registry is an immutable snapshot built from a directory of
``*.manifest.json`` files (plain JSON, one model each). Reload builds a new
snapshot; in-flight requests keep whatever snapshot they resolved against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import TYPE_CHECKING, Iterable, Mapping, Optional

from .errors import PrismError
from .runtime import ResourceLimits
from .wire import MODEL_NAME_RE

if TYPE_CHECKING:
    from .auth import ApiKeyRecord

VISIBILITY_PUBLIC = "public"
VISIBILITY_RESTRICTED = "restricted"


class ManifestParseError(PrismError):
    """A manifest file is unreadable or has a bad field."""

    def __init__(self, path: Path, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path


class DuplicateModelName(PrismError):
    """Two manifests in one directory claim the same model name."""


class ModelNotFound(PrismError):
    """No manifest with the requested name."""


@dataclass(frozen=True)
class ModelManifest:
    """Registration record that makes a plugin executable addressable."""

    name: str
    command: tuple[str, ...]
    version: str = "0"
    supports_async: bool = False
    visibility: str = VISIBILITY_PUBLIC
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    description: str = ""
    isolation: str = "process"

    @property
    def is_public(self) -> bool:
        return self.visibility == VISIBILITY_PUBLIC


def _parse_manifest(path: Path) -> ModelManifest:
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestParseError(path, f"unreadable manifest: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestParseError(path, "manifest must be a JSON object")

    name = data.get("name")
    if not isinstance(name, str) or not MODEL_NAME_RE.fullmatch(name):
        raise ManifestParseError(path, "field 'name' must match [a-z0-9_-]{1,64}")

    command = data.get("command")
    if (
        not isinstance(command, list)
        or not command
        or not all(isinstance(c, str) and c for c in command)
    ):
        raise ManifestParseError(path, "field 'command' must be a non-empty list of strings")

    visibility = data.get("visibility", VISIBILITY_PUBLIC)
    if visibility not in (VISIBILITY_PUBLIC, VISIBILITY_RESTRICTED):
        raise ManifestParseError(path, "field 'visibility' must be 'public' or 'restricted'")

    supports_async = data.get("supports_async", False)
    if not isinstance(supports_async, bool):
        raise ManifestParseError(path, "field 'supports_async' must be a boolean")

    raw_limits = data.get("limits", {})
    if not isinstance(raw_limits, dict):
        raise ManifestParseError(path, "field 'limits' must be an object")
    try:
        limits = ResourceLimits(
            wall_timeout=raw_limits.get("wall_timeout", ResourceLimits.wall_timeout),
            cpu_limit=raw_limits.get("cpu_limit", ResourceLimits.cpu_limit),
            memory_limit=raw_limits.get("memory_limit", ResourceLimits.memory_limit),
            max_output_bytes=raw_limits.get(
                "max_output_bytes", ResourceLimits.max_output_bytes
            ),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestParseError(path, f"field 'limits': {exc}") from exc

    return ModelManifest(
        name=name,
        command=tuple(command),
        version=str(data.get("version", "0")),
        supports_async=supports_async,
        visibility=visibility,
        limits=limits,
        description=str(data.get("description", "")),
        isolation=str(data.get("isolation", "process")),
    )


@dataclass(frozen=True)
class Registry:
    """Immutable name → manifest snapshot."""

    _models: Mapping[str, ModelManifest]

    def __len__(self) -> int:
        return len(self._models)

    def __iter__(self) -> Iterable[ModelManifest]:
        return iter(self._models.values())

    def resolve(self, model: str) -> ModelManifest:
        try:
            return self._models[model]
        except KeyError:
            raise ModelNotFound(f"no model named {model!r}") from None

    def list_models(self, caller: Optional["ApiKeyRecord"] = None) -> list[dict]:
        """Public models always; restricted ones only for callers whose ACL
        covers them."""
        entries = []
        for manifest in self._models.values():
            if not manifest.is_public and not _acl_covers(caller, manifest.name):
                continue
            entries.append(
                {
                    "name": manifest.name,
                    "version": manifest.version,
                    "description": manifest.description,
                    "supports_async": manifest.supports_async,
                }
            )
        return entries


def _acl_covers(caller: Optional["ApiKeyRecord"], model: str) -> bool:
    if caller is None:
        return False
    return caller.acl_allows(model)


def load_registry(models_dir: str | Path) -> Registry:
    """Build a registry snapshot from every *.manifest.json in a directory."""
    root = Path(models_dir)
    if not root.is_dir():
        raise ManifestParseError(root, "models directory does not exist")
    models: dict[str, ModelManifest] = {}
    for path in sorted(root.glob("*.manifest.json")):
        manifest = _parse_manifest(path)
        if manifest.name in models:
            raise DuplicateModelName(
                f"model {manifest.name!r} declared by more than one manifest"
            )
        models[manifest.name] = manifest
    return Registry(MappingProxyType(models))
