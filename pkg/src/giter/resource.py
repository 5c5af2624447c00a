"""Custom resource document model: lifecycle phases, canonical form, paths.

Documents have a producer-owned ``spec`` and a consumer-owned ``status``.
All types here are immutable values and all operations are pure, so they can
be shared freely across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from enum import Enum
from typing import Any, Iterable, Mapping

from .canonical import emit_document, load_document
from .clock import ensure_utc, format_timestamp, parse_timestamp
from .errors import (
    IdentifierError,
    IllegalTransition,
    ParseError,
    PathError,
    StructureError,
)

TOP_LEVEL_KEYS = ("apiVersion", "kind", "metadata", "spec", "status")

_NAME_RE = re.compile(r"^[a-z0-9]([a-z0-9-]*[a-z0-9])?$")
_KIND_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")
_API_VERSION_RE = re.compile(r"^[A-Za-z0-9._-]+(/[A-Za-z0-9._-]+)?$")


class Phase(str, Enum):
    PENDING = "Pending"
    PROCESSING = "Processing"
    COMPLETED = "Completed"
    FAILED = "Failed"
    ARCHIVED = "Archived"


#: The full lifecycle relation. Anything else is an illegal transition.
VALID_TRANSITIONS = frozenset(
    {
        (Phase.PENDING, Phase.PROCESSING),
        (Phase.PROCESSING, Phase.COMPLETED),
        (Phase.PROCESSING, Phase.FAILED),
        (Phase.COMPLETED, Phase.PENDING),
        (Phase.FAILED, Phase.PENDING),
        (Phase.COMPLETED, Phase.ARCHIVED),
        (Phase.FAILED, Phase.ARCHIVED),
    }
)


class _Absent:
    """Marker returned by get_path for paths that address nothing."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()


def check_value_tree(value: Any, where: str = "value") -> None:
    """Reject anything that is not a map/list/scalar tree with string keys."""
    if value is None or isinstance(value, (bool, int, float, str)):
        return
    if isinstance(value, dict):
        for key, child in value.items():
            if not isinstance(key, str):
                raise StructureError(f"{where}: map keys must be strings, got {key!r}")
            check_value_tree(child, f"{where}.{key}")
        return
    if isinstance(value, list):
        for index, child in enumerate(value):
            check_value_tree(child, f"{where}[{index}]")
        return
    raise StructureError(f"{where}: unsupported value of type {type(value).__name__}")


def normalize_value_tree(value: Any, where: str = "value") -> Any:
    """Coerce YAML-loader artifacts (timestamps, dates) into plain scalars."""
    if isinstance(value, datetime):
        return format_timestamp(value)
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, dict):
        out = {}
        for key, child in value.items():
            if not isinstance(key, str):
                raise StructureError(f"{where}: map keys must be strings, got {key!r}")
            out[key] = normalize_value_tree(child, f"{where}.{key}")
        return out
    if isinstance(value, list):
        return [normalize_value_tree(v, f"{where}[{i}]") for i, v in enumerate(value)]
    if value is None or isinstance(value, (bool, int, float, str)):
        return value
    raise StructureError(f"{where}: unsupported value of type {type(value).__name__}")


@dataclass(frozen=True)
class ResourceMetadata:
    name: str
    namespace: str = "default"
    generation: int = 1
    labels: Mapping[str, str] = field(default_factory=dict)
    annotations: Mapping[str, str] = field(default_factory=dict)
    created_at: datetime | None = None

    def __post_init__(self):
        validate_identifier(self.name, "name")
        validate_identifier(self.namespace, "namespace")
        if not isinstance(self.generation, int) or isinstance(self.generation, bool):
            raise StructureError("metadata.generation must be an integer")
        if self.generation < 1:
            raise StructureError("metadata.generation must be >= 1")
        for mapping, label in ((self.labels, "labels"), (self.annotations, "annotations")):
            for key, value in mapping.items():
                if not isinstance(key, str) or not isinstance(value, str):
                    raise StructureError(f"metadata.{label} must map strings to strings")
        if self.created_at is not None:
            object.__setattr__(self, "created_at", ensure_utc(self.created_at))


@dataclass(frozen=True)
class ResourceStatus:
    phase: Phase
    result: Mapping[str, Any] = field(default_factory=dict)
    observed_generation: int = 0
    message: str | None = None
    updated_at: datetime | None = None

    def __post_init__(self):
        if not isinstance(self.phase, Phase):
            object.__setattr__(self, "phase", Phase(self.phase))
        if not isinstance(self.result, dict):
            raise StructureError("status.result must be a map")
        check_value_tree(self.result, "status.result")
        if not isinstance(self.observed_generation, int) or isinstance(
            self.observed_generation, bool
        ):
            raise StructureError("status.observedGeneration must be an integer")
        if self.observed_generation < 0:
            raise StructureError("status.observedGeneration must be >= 0")
        if self.phase is Phase.FAILED and not self.message:
            raise StructureError("status.message is mandatory when phase is Failed")
        if self.updated_at is not None:
            object.__setattr__(self, "updated_at", ensure_utc(self.updated_at))


@dataclass(frozen=True)
class ExchangeResource:
    api_version: str
    kind: str
    metadata: ResourceMetadata
    spec: Mapping[str, Any] = field(default_factory=dict)
    status: ResourceStatus | None = None

    def __post_init__(self):
        if not self.api_version or not _API_VERSION_RE.match(self.api_version):
            raise IdentifierError(f"invalid apiVersion {self.api_version!r}")
        if not self.kind or not _KIND_RE.match(self.kind):
            raise IdentifierError(f"invalid kind {self.kind!r}")
        if not isinstance(self.spec, dict):
            raise StructureError("spec must be a map")
        check_value_tree(self.spec, "spec")
        if self.status is not None and self.status.observed_generation > self.metadata.generation:
            raise StructureError(
                "status.observedGeneration must not exceed metadata.generation"
            )

    @property
    def ref(self) -> str:
        """Stable identifier ``<namespace>/<kind lowercase>/<name>``."""
        return f"{self.metadata.namespace}/{self.kind.lower()}/{self.metadata.name}"

    def with_status(self, status: ResourceStatus | None) -> "ExchangeResource":
        return replace(self, status=status)

    def with_spec(self, spec: Mapping[str, Any], generation: int | None = None) -> "ExchangeResource":
        metadata = self.metadata
        if generation is not None:
            metadata = replace(metadata, generation=generation)
        return replace(self, spec=dict(spec), metadata=metadata)


def validate_identifier(value: str, what: str = "name") -> str:
    if not isinstance(value, str) or not _NAME_RE.match(value) or len(value) > 63:
        raise IdentifierError(
            f"invalid {what} {value!r}: must match [a-z0-9]([a-z0-9-]*[a-z0-9])? "
            "and be at most 63 characters"
        )
    return value


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def to_document_tree(resource: ExchangeResource) -> dict:
    """Plain wire tree with camelCase keys, timestamps rendered as strings."""
    meta = resource.metadata
    metadata: dict[str, Any] = {
        "name": meta.name,
        "namespace": meta.namespace,
        "generation": meta.generation,
    }
    if meta.labels:
        metadata["labels"] = dict(meta.labels)
    if meta.annotations:
        metadata["annotations"] = dict(meta.annotations)
    if meta.created_at is not None:
        metadata["createdAt"] = format_timestamp(meta.created_at)
    tree: dict[str, Any] = {
        "apiVersion": resource.api_version,
        "kind": resource.kind,
        "metadata": metadata,
        "spec": resource.spec,
    }
    if resource.status is not None:
        status = resource.status
        status_tree: dict[str, Any] = {
            "phase": status.phase.value,
            "result": status.result,
            "observedGeneration": status.observed_generation,
        }
        if status.message is not None:
            status_tree["message"] = status.message
        if status.updated_at is not None:
            status_tree["updatedAt"] = format_timestamp(status.updated_at)
        tree["status"] = status_tree
    return tree


def canonical_serialize(resource: ExchangeResource) -> bytes:
    """Byte-identical canonical document for semantically equal resources."""
    return emit_document(to_document_tree(resource), TOP_LEVEL_KEYS).encode("utf-8")


def _require_keys(tree: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    unknown = sorted(set(tree) - set(allowed))
    if unknown:
        raise StructureError(f"unknown {where} keys: {', '.join(map(repr, unknown))}")


def _parse_timestamp_field(value: Any, where: str) -> datetime:
    if isinstance(value, datetime):
        return ensure_utc(value)
    if isinstance(value, str):
        try:
            return parse_timestamp(value)
        except ValueError as exc:
            raise StructureError(f"{where}: invalid timestamp {value!r}") from exc
    raise StructureError(f"{where}: expected a timestamp, got {type(value).__name__}")


def _parse_metadata(tree: Any) -> ResourceMetadata:
    if not isinstance(tree, dict):
        raise StructureError("metadata must be a map")
    _require_keys(
        tree,
        ("name", "namespace", "generation", "labels", "annotations", "createdAt"),
        "metadata",
    )
    if "name" not in tree:
        raise StructureError("metadata.name is required")
    created_at = None
    if "createdAt" in tree:
        created_at = _parse_timestamp_field(tree["createdAt"], "metadata.createdAt")
    return ResourceMetadata(
        name=tree["name"],
        namespace=tree.get("namespace", "default"),
        generation=tree.get("generation", 1),
        labels=dict(tree.get("labels") or {}),
        annotations=dict(tree.get("annotations") or {}),
        created_at=created_at,
    )


def _parse_status(tree: Any) -> ResourceStatus:
    if not isinstance(tree, dict):
        raise StructureError("status must be a map")
    _require_keys(
        tree, ("phase", "result", "observedGeneration", "message", "updatedAt"), "status"
    )
    if "phase" not in tree:
        raise StructureError("status.phase is required")
    try:
        phase = Phase(tree["phase"])
    except ValueError as exc:
        raise StructureError(f"unknown phase {tree['phase']!r}") from exc
    result = tree.get("result")
    if result is None:
        result = {}
    result = normalize_value_tree(result, "status.result")
    if not isinstance(result, dict):
        raise StructureError("status.result must be a map")
    updated_at = None
    if "updatedAt" in tree:
        updated_at = _parse_timestamp_field(tree["updatedAt"], "status.updatedAt")
    message = tree.get("message")
    if message is not None and not isinstance(message, str):
        raise StructureError("status.message must be a string")
    return ResourceStatus(
        phase=phase,
        result=result,
        observed_generation=tree.get("observedGeneration", 0),
        message=message,
        updated_at=updated_at,
    )


def parse_resource(document: bytes | str) -> ExchangeResource:
    """Parse a document into an ExchangeResource; top-level keys are closed."""
    return resource_from_tree(load_document(document))


def resource_from_tree(tree: Any) -> ExchangeResource:
    """Build a resource from an already-loaded document tree."""
    if not isinstance(tree, dict):
        raise StructureError("document root must be a map")
    _require_keys(tree, TOP_LEVEL_KEYS, "top-level")
    for required in ("apiVersion", "kind", "metadata"):
        if required not in tree:
            raise StructureError(f"{required} is required")
    spec = normalize_value_tree(tree.get("spec") or {}, "spec")
    if not isinstance(spec, dict):
        raise StructureError("spec must be a map")
    status = _parse_status(tree["status"]) if tree.get("status") is not None else None
    try:
        return ExchangeResource(
            api_version=tree["apiVersion"],
            kind=tree["kind"],
            metadata=_parse_metadata(tree["metadata"]),
            spec=spec,
            status=status,
        )
    except (IdentifierError, StructureError):
        raise
    except (TypeError, ValueError) as exc:
        raise StructureError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Value paths
# ---------------------------------------------------------------------------

_SEGMENT_RE = re.compile(r"^([^.\[\]]+)((\[\d+\])*)$")
_INDEX_RE = re.compile(r"\[(\d+)\]")


def parse_path(path: str) -> list[str | int]:
    """Split ``a.b[2].c`` into ['a', 'b', 2, 'c']."""
    if not isinstance(path, str) or not path:
        raise PathError(f"invalid path {path!r}")
    segments: list[str | int] = []
    for part in path.split("."):
        match = _SEGMENT_RE.match(part)
        if not match:
            raise PathError(f"invalid path segment {part!r} in {path!r}")
        segments.append(match.group(1))
        for index in _INDEX_RE.findall(match.group(2)):
            segments.append(int(index))
    return segments


def get_path(tree: Any, path: str | list[str | int]) -> Any:
    """Return the addressed node or ABSENT when the path leads nowhere."""
    segments = parse_path(path) if isinstance(path, str) else list(path)
    node = tree
    for segment in segments:
        if node is ABSENT:
            return ABSENT
        if isinstance(segment, str):
            if isinstance(node, dict):
                node = node.get(segment, ABSENT)
            elif isinstance(node, list):
                raise PathError(f"segment {segment!r} cannot index a list")
            else:
                raise PathError(f"segment {segment!r} addresses through a scalar")
        else:
            if isinstance(node, list):
                node = node[segment] if segment < len(node) else ABSENT
            elif isinstance(node, dict):
                raise PathError(f"index [{segment}] cannot index a map")
            else:
                raise PathError(f"index [{segment}] addresses through a scalar")
    return node


def set_path(tree: Any, path: str | list[str | int], value: Any) -> Any:
    """Return a new tree with ``value`` at ``path``; the input is not mutated.

    Intermediate maps (and lists, for index segments) are created as needed.
    A list index may be at most one past the current end, which appends.
    """
    segments = parse_path(path) if isinstance(path, str) else list(path)
    return _set_segments(tree, segments, value)


def _set_segments(node: Any, segments: list[str | int], value: Any) -> Any:
    if not segments:
        return value
    segment = segments[0]
    if isinstance(segment, str):
        if node is ABSENT:
            node = {}
        if not isinstance(node, dict):
            raise PathError(f"segment {segment!r} addresses through a non-map value")
        child = node.get(segment, ABSENT)
        out = dict(node)
        out[segment] = _set_segments(child, segments[1:], value)
        return out
    if node is ABSENT:
        node = []
    if not isinstance(node, list):
        raise PathError(f"index [{segment}] addresses through a non-list value")
    if segment > len(node):
        raise PathError(f"index [{segment}] is past the end of a list of {len(node)}")
    out_list = list(node)
    if segment == len(out_list):
        out_list.append(_set_segments(ABSENT, segments[1:], value))
    else:
        out_list[segment] = _set_segments(out_list[segment], segments[1:], value)
    return out_list


# ---------------------------------------------------------------------------
# Phase machine
# ---------------------------------------------------------------------------


def transition_phase(
    status: ResourceStatus, next_phase: Phase, at: datetime | None = None
) -> ResourceStatus:
    """Move a status along the lifecycle relation, stamping updated_at."""
    next_phase = Phase(next_phase)
    if (status.phase, next_phase) not in VALID_TRANSITIONS:
        raise IllegalTransition(
            f"illegal phase transition {status.phase.value} -> {next_phase.value}"
        )
    stamp = ensure_utc(at) if at is not None else datetime.now(timezone.utc)
    return replace(status, phase=next_phase, updated_at=stamp)
