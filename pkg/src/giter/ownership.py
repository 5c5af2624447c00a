"""Section ownership: who may change what, and how concurrent edits merge.

The contract is enforced at the granularity of the top-level document
sections. The producer owns ``spec`` and ``metadata``, the consumer owns
``status``; a write that crosses that boundary is never silently resolved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping

from .errors import MergeConflict, ValidationFailed
from .resource import ExchangeResource, Phase, ResourceStatus, to_document_tree
from .schema import SchemaDefinition, validate_resource


class Role(str, Enum):
    PRODUCER = "producer"
    CONSUMER = "consumer"
    OBSERVER = "observer"


SECTIONS = ("metadata", "spec", "status")
IDENTITY_FIELDS = ("apiVersion", "kind", "metadata.name", "metadata.namespace")


@dataclass(frozen=True)
class OwnershipPolicy:
    section_owner: Mapping[str, Role] = field(
        default_factory=lambda: {
            "metadata": Role.PRODUCER,
            "spec": Role.PRODUCER,
            "status": Role.CONSUMER,
        }
    )
    #: producer may write the initial {phase: Pending, result: {}} status
    seed_status_allowed: bool = True


class ChangeKind(str, Enum):
    CREATED = "Created"
    SPEC_ONLY = "SpecOnly"
    STATUS_ONLY = "StatusOnly"
    METADATA_ONLY = "MetadataOnly"
    MIXED = "Mixed"
    DELETED = "Deleted"
    NO_CHANGE = "NoChange"


@dataclass(frozen=True)
class ChangeClass:
    kind: ChangeKind
    changed_sections: frozenset[str] = frozenset()
    changed_paths: tuple[str, ...] = ()
    identity_violations: tuple[str, ...] = ()
    seeded_status: ResourceStatus | None = None


@dataclass(frozen=True)
class Verdict:
    allowed: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.allowed


def _diff_paths(old: Any, new: Any, path: str) -> list[str]:
    """Paths of differing leaves; an added/removed subtree reports its root."""
    if type(old) is not type(new):
        return [path]
    if isinstance(old, dict):
        out = []
        for key in sorted(set(old) | set(new)):
            child = f"{path}.{key}" if path else key
            if key not in old or key not in new:
                out.append(child)
            else:
                out.extend(_diff_paths(old[key], new[key], child))
        return out
    if isinstance(old, list):
        if len(old) != len(new):
            return [path]
        out = []
        for index, (a, b) in enumerate(zip(old, new)):
            out.extend(_diff_paths(a, b, f"{path}[{index}]"))
        return out
    return [] if old == new else [path]


def _section_tree(resource: ExchangeResource | None) -> dict:
    return to_document_tree(resource) if resource is not None else {}


def classify(
    old: ExchangeResource | None, new: ExchangeResource | None
) -> ChangeClass:
    """Structural diff of a document write, bucketed by top-level section."""
    if old is None and new is None:
        raise ValueError("classify requires at least one document")
    if old is None:
        sections = tuple(s for s in SECTIONS if _section_tree(new).get(s) is not None)
        return ChangeClass(
            ChangeKind.CREATED,
            changed_sections=frozenset(sections),
            changed_paths=sections,
            seeded_status=new.status,
        )
    if new is None:
        return ChangeClass(ChangeKind.DELETED, frozenset(SECTIONS))

    old_tree, new_tree = to_document_tree(old), to_document_tree(new)
    identity_violations = tuple(
        f"immutable field {name} changed"
        for name, old_value, new_value in (
            ("apiVersion", old.api_version, new.api_version),
            ("kind", old.kind, new.kind),
            ("metadata.name", old.metadata.name, new.metadata.name),
            ("metadata.namespace", old.metadata.namespace, new.metadata.namespace),
        )
        if old_value != new_value
    )

    changed: set[str] = set()
    paths: list[str] = []
    for section in SECTIONS:
        section_paths = _diff_paths(old_tree.get(section), new_tree.get(section), section)
        if section_paths:
            changed.add(section)
            paths.extend(section_paths)

    if identity_violations:
        return ChangeClass(
            ChangeKind.MIXED, frozenset(changed), tuple(paths), identity_violations
        )
    if not changed:
        return ChangeClass(ChangeKind.NO_CHANGE)

    owners = {Role.PRODUCER if s in ("spec", "metadata") else Role.CONSUMER for s in changed}
    if len(owners) > 1:
        kind = ChangeKind.MIXED
    elif "spec" in changed:
        kind = ChangeKind.SPEC_ONLY
    elif "status" in changed:
        kind = ChangeKind.STATUS_ONLY
    else:
        kind = ChangeKind.METADATA_ONLY
    return ChangeClass(kind, frozenset(changed), tuple(paths))


def is_pending_seed(status: ResourceStatus | None) -> bool:
    """The only status a producer may author: the initial Pending skeleton."""
    return (
        status is not None
        and status.phase is Phase.PENDING
        and status.result == {}
        and status.observed_generation == 0
        and status.message is None
        and status.updated_at is None
    )


def check_permitted(
    role: Role, change: ChangeClass, policy: OwnershipPolicy | None = None
) -> Verdict:
    """Decide whether a change class is within a role's owned sections."""
    policy = policy or OwnershipPolicy()
    role = Role(role)
    if change.identity_violations:
        return Verdict(False, change.identity_violations)
    if change.kind is ChangeKind.NO_CHANGE:
        if role is Role.OBSERVER:
            return Verdict(False, ("observers may not write",))
        return Verdict(True)
    if role is Role.PRODUCER:
        if change.kind is ChangeKind.CREATED:
            if change.seeded_status is None:
                return Verdict(True)
            if not policy.seed_status_allowed:
                return Verdict(False, ("status seeding is disabled by policy",))
            if not is_pending_seed(change.seeded_status):
                return Verdict(
                    False,
                    ("seeded status must be the Pending skeleton {phase: Pending, result: {}}",),
                )
            return Verdict(True)
        if change.kind in (ChangeKind.SPEC_ONLY, ChangeKind.METADATA_ONLY, ChangeKind.DELETED):
            return Verdict(True)
        return Verdict(False, _foreign_paths(change, owned=("spec", "metadata")))
    if role is Role.CONSUMER:
        if change.kind is ChangeKind.STATUS_ONLY:
            return Verdict(True)
        return Verdict(False, _foreign_paths(change, owned=("status",)))
    return Verdict(False, ("observers may not write",))


def _foreign_paths(change: ChangeClass, owned: tuple[str, ...]) -> tuple[str, ...]:
    foreign = [p for p in change.changed_paths if p.split(".")[0].split("[")[0] not in owned]
    if foreign:
        return tuple(foreign)
    return (f"change class {change.kind.value} is outside the role's owned sections",)


def merge_resources(
    base: ExchangeResource | None,
    ours: ExchangeResource,
    theirs: ExchangeResource,
    policy: OwnershipPolicy | None = None,
    registry: Mapping[str, SchemaDefinition] | None = None,
) -> ExchangeResource:
    """Three-way merge at section granularity.

    Each top-level section is taken from the side that changed it relative to
    the base. Both sides changing a section to different content means the
    ownership contract was already violated upstream; that surfaces as a
    MergeConflict, never a silent resolution.
    """
    for name, ours_value, theirs_value in (
        ("apiVersion", ours.api_version, theirs.api_version),
        ("kind", ours.kind, theirs.kind),
        ("metadata.name", ours.metadata.name, theirs.metadata.name),
        ("metadata.namespace", ours.metadata.namespace, theirs.metadata.namespace),
    ):
        if ours_value != theirs_value:
            raise MergeConflict(
                f"cannot merge documents with different {name}", section="identity"
            )

    def pick(section: str, base_value, ours_value, theirs_value):
        ours_changed = ours_value != base_value
        theirs_changed = theirs_value != base_value
        if not ours_changed and not theirs_changed:
            return base_value
        if ours_changed and not theirs_changed:
            return ours_value
        if theirs_changed and not ours_changed:
            return theirs_value
        if ours_value == theirs_value:
            return ours_value
        raise MergeConflict(
            f"both sides changed section {section!r} to different content",
            section=section,
        )

    base_meta = base.metadata if base is not None else None
    base_spec = base.spec if base is not None else None
    base_status = base.status if base is not None else None

    merged = ExchangeResource(
        api_version=ours.api_version,
        kind=ours.kind,
        metadata=pick("metadata", base_meta, ours.metadata, theirs.metadata),
        spec=pick("spec", base_spec, ours.spec, theirs.spec) or {},
        status=pick("status", base_status, ours.status, theirs.status),
    )
    if registry is not None:
        report = validate_resource(merged, registry)
        if not report.ok:
            raise ValidationFailed(
                "merged document violates the schema", report.violations
            )
    return merged
