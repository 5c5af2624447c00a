"""Trust, authorization and audit over the shared history.

Identity is the commit author email mapped through `.giter/policy.yaml`; the
trust hook slot lets deployments swap in signature-based verification with
the same verdict contract. Audit walks the full history and checks every
resource write against the ownership contract; replay reconstructs the final
repository state purely from recorded diffs and compares it byte-for-byte
with the checkout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .canonical import load_document
from .errors import GiterError, ParseError, PolicyError
from .gitutil import commit_changed_paths, commit_info, rev_list, show_blob
from .ownership import (
    ChangeKind,
    OwnershipPolicy,
    Role,
    Verdict,
    check_permitted,
    classify,
)
from .resource import ExchangeResource, Phase, VALID_TRANSITIONS, parse_resource
from .store import (
    ARCHIVE_DIR,
    POLICY_FILE,
    RESOURCES_DIR,
    CommitRecord,
    RepoHandle,
    _record_for,
    is_resource_document,
)

TrustHook = Callable[[CommitRecord, "TrustPolicy"], Verdict]


@dataclass(frozen=True)
class TrustPolicy:
    identity_roles: Mapping[str, Role] = field(default_factory=dict)
    unknown_identity_action: str = "flag"  # flag | reject
    seed_status_allowed: bool = True
    trust_hook: TrustHook | None = None

    def __post_init__(self):
        if self.unknown_identity_action not in ("flag", "reject"):
            raise PolicyError(
                f"unknownIdentity must be flag or reject, got {self.unknown_identity_action!r}"
            )

    def role_of(self, email: str) -> Role | None:
        return self.identity_roles.get(email)

    def ownership(self) -> OwnershipPolicy:
        return OwnershipPolicy(seed_status_allowed=self.seed_status_allowed)


def parse_policy(document: bytes | str | Mapping[str, Any] | None) -> TrustPolicy:
    """Load `.giter/policy.yaml`: identities, unknownIdentity, seedStatusAllowed."""
    if document is None:
        return TrustPolicy()
    tree = load_document(document) if isinstance(document, (str, bytes)) else document
    if tree is None:
        return TrustPolicy()
    if not isinstance(tree, dict):
        raise PolicyError("policy document root must be a map")
    unknown = sorted(set(tree) - {"identities", "unknownIdentity", "seedStatusAllowed"})
    if unknown:
        raise PolicyError(f"unknown policy keys {unknown}")
    identities: dict[str, Role] = {}
    for index, entry in enumerate(tree.get("identities") or []):
        if not isinstance(entry, dict) or "email" not in entry or "role" not in entry:
            raise PolicyError(f"identities[{index}] must be a map with email and role")
        try:
            role = Role(entry["role"])
        except ValueError as exc:
            raise PolicyError(f"identities[{index}]: unknown role {entry['role']!r}") from exc
        identities[entry["email"]] = role
    return TrustPolicy(
        identity_roles=identities,
        unknown_identity_action=tree.get("unknownIdentity", "flag"),
        seed_status_allowed=bool(tree.get("seedStatusAllowed", True)),
    )


def load_policy(handle: RepoHandle) -> TrustPolicy:
    policy_file = handle.root / POLICY_FILE
    if not policy_file.is_file():
        return TrustPolicy()
    return parse_policy(policy_file.read_bytes())


def policy_document(policy: TrustPolicy) -> dict:
    return {
        "identities": [
            {"email": email, "role": role.value}
            for email, role in sorted(policy.identity_roles.items())
        ],
        "unknownIdentity": policy.unknown_identity_action,
        "seedStatusAllowed": policy.seed_status_allowed,
    }


def verify_commit(record: CommitRecord, policy: TrustPolicy) -> Verdict:
    """Default trust check: listed email whose Giter-Role trailer matches."""
    if policy.trust_hook is not None:
        return policy.trust_hook(record, policy)
    role = policy.role_of(record.author_email)
    if role is None:
        return Verdict(False, (f"author {record.author_email} is not a listed identity",))
    trailer_role = record.trailers.get("Giter-Role")
    if trailer_role != role.value:
        return Verdict(
            False,
            (f"trailer role {trailer_role!r} does not match mapped role {role.value!r}",),
        )
    return Verdict(True)


# ---------------------------------------------------------------------------
# Audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditFinding:
    commit_id: str
    severity: str  # violation | warning
    code: str  # role-section-breach | unknown-identity | foreign-commit |
    #            generation-regression | illegal-phase-transition |
    #            immutable-field-change
    detail: str
    paths: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "commit": self.commit_id,
            "severity": self.severity,
            "code": self.code,
            "detail": self.detail,
            "paths": list(self.paths),
        }


def _doc_at(handle: RepoHandle, rev: str | None, path: str) -> ExchangeResource | None:
    if rev is None:
        return None
    blob = show_blob(handle.root, rev, path)
    if blob is None:
        return None
    try:
        return parse_resource(blob)
    except GiterError:
        raise ParseError(f"{path} at {rev[:8]} is not a valid resource document")


def _phase_change_legal(
    old: ExchangeResource | None, new: ExchangeResource | None
) -> tuple[bool, str]:
    old_status = old.status if old is not None else None
    new_status = new.status if new is not None else None
    if new is None:
        return True, ""  # deletion is judged by ownership, not phase
    if new_status is None:
        if old_status is None:
            return True, ""
        return False, "status section was removed"
    if old_status is None:
        # First status write: the Pending seed or a consumer pickup.
        if new_status.phase in (Phase.PENDING, Phase.PROCESSING):
            return True, ""
        return False, f"initial phase {new_status.phase.value} is not Pending/Processing"
    pair = (old_status.phase, new_status.phase)
    if pair[0] is pair[1] or pair in VALID_TRANSITIONS:
        return True, ""
    # A consumer picking up a new generation collapses the legal hop through
    # Pending into one write.
    if (
        old_status.phase in (Phase.COMPLETED, Phase.FAILED)
        and new_status.phase in (Phase.PENDING, Phase.PROCESSING)
        and new_status.observed_generation > old_status.observed_generation
    ):
        return True, ""
    return False, f"{pair[0].value} -> {pair[1].value}"


def _audit_generations(
    old: ExchangeResource | None, new: ExchangeResource | None
) -> list[str]:
    problems = []
    if old is not None and new is not None:
        if new.metadata.generation < old.metadata.generation:
            problems.append(
                f"generation regressed {old.metadata.generation} -> {new.metadata.generation}"
            )
        if (
            old.status is not None
            and new.status is not None
            and new.status.observed_generation < old.status.observed_generation
        ):
            problems.append(
                "observedGeneration regressed "
                f"{old.status.observed_generation} -> {new.status.observed_generation}"
            )
    return problems


def _section_values(resource: ExchangeResource | None) -> dict[str, Any]:
    if resource is None:
        return {"metadata": None, "spec": None, "status": None}
    from .resource import to_document_tree

    tree = to_document_tree(resource)
    return {s: tree.get(s) for s in ("metadata", "spec", "status")}


def audit_repo(handle: RepoHandle, policy: TrustPolicy | None = None) -> list[AuditFinding]:
    """Walk the full history oldest-first and check every resource write.

    Findings are data; an empty list is a clean repository. Commits that touch
    no resource documents (schema/policy/docs changes) are administrative and
    not judged.
    """
    policy = policy or load_policy(handle)
    ownership = policy.ownership()
    findings: list[AuditFinding] = []

    for sha in rev_list(handle.root, handle.branch):
        record = _record_for(handle, sha)
        resource_changes = [p for p in record.touched_paths if is_resource_document(p)]
        if not resource_changes:
            continue

        if record.is_merge:
            findings.extend(_audit_merge(handle, record, resource_changes))
            continue

        if record.foreign:
            findings.append(
                AuditFinding(
                    sha,
                    "warning",
                    "foreign-commit",
                    f"commit by {record.author_email} carries no Giter trailers",
                    tuple(resource_changes),
                )
            )

        role = policy.role_of(record.author_email)
        if role is None:
            severity = "violation" if policy.unknown_identity_action == "reject" else "warning"
            findings.append(
                AuditFinding(
                    sha,
                    severity,
                    "unknown-identity",
                    f"author {record.author_email} is not a listed identity",
                    tuple(resource_changes),
                )
            )
            continue

        trailer_role = record.trailers.get("Giter-Role")
        if trailer_role is not None and trailer_role != role.value:
            findings.append(
                AuditFinding(
                    sha,
                    "violation",
                    "role-section-breach",
                    f"trailer claims role {trailer_role!r} but {record.author_email} "
                    f"is mapped to {role.value!r}",
                    tuple(resource_changes),
                )
            )
            continue

        parent = record.parents[0] if record.parents else None
        for path in resource_changes:
            try:
                old = _doc_at(handle, parent, path)
                new = _doc_at(handle, sha, path)
            except ParseError as exc:
                findings.append(
                    AuditFinding(sha, "warning", "foreign-commit", str(exc), (path,))
                )
                continue
            findings.extend(
                _audit_resource_change(sha, path, old, new, role, ownership)
            )
    return findings


def _audit_resource_change(
    sha: str,
    path: str,
    old: ExchangeResource | None,
    new: ExchangeResource | None,
    role: Role,
    ownership: OwnershipPolicy,
) -> list[AuditFinding]:
    findings: list[AuditFinding] = []
    if path.startswith(f"{ARCHIVE_DIR}/"):
        ok = (
            old is None
            and new is not None
            and new.status is not None
            and new.status.phase is Phase.ARCHIVED
            and role is Role.PRODUCER
        )
        if not ok:
            findings.append(
                AuditFinding(
                    sha,
                    "violation",
                    "role-section-breach",
                    "archive files are immutable producer-written terminal snapshots",
                    (path,),
                )
            )
        return findings

    change = classify(old, new)
    if change.identity_violations:
        findings.append(
            AuditFinding(
                sha,
                "violation",
                "immutable-field-change",
                "; ".join(change.identity_violations),
                (path,),
            )
        )
        return findings

    verdict = check_permitted(role, change, ownership)
    if not verdict.allowed:
        findings.append(
            AuditFinding(
                sha,
                "violation",
                "role-section-breach",
                f"{role.value} applied a {change.kind.value} change: "
                + "; ".join(verdict.reasons),
                (path,),
            )
        )
        return findings

    for problem in _audit_generations(old, new):
        findings.append(
            AuditFinding(sha, "violation", "generation-regression", problem, (path,))
        )
    if not findings:
        legal, detail = _phase_change_legal(old, new)
        if not legal:
            findings.append(
                AuditFinding(
                    sha,
                    "violation",
                    "illegal-phase-transition",
                    f"illegal phase transition: {detail}",
                    (path,),
                )
            )
    return findings


def _audit_merge(
    handle: RepoHandle, record: CommitRecord, resource_changes: list[str]
) -> list[AuditFinding]:
    """A merge may only recombine sections that exist on one of its parents."""
    findings = []
    ours, theirs = record.parents[0], record.parents[1]
    for path in resource_changes:
        try:
            merged = _doc_at(handle, record.commit_id, path)
            ours_doc = _doc_at(handle, ours, path)
            theirs_doc = _doc_at(handle, theirs, path)
        except ParseError as exc:
            findings.append(
                AuditFinding(record.commit_id, "warning", "foreign-commit", str(exc), (path,))
            )
            continue
        merged_sections = _section_values(merged)
        ours_sections = _section_values(ours_doc)
        theirs_sections = _section_values(theirs_doc)
        for section, value in merged_sections.items():
            if value != ours_sections[section] and value != theirs_sections[section]:
                findings.append(
                    AuditFinding(
                        record.commit_id,
                        "violation",
                        "role-section-breach",
                        f"merge introduced content in section {section!r} "
                        "that matches neither parent",
                        (path,),
                    )
                )
    return findings


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimelineEntry:
    commit_id: str
    path: str
    phase: str | None
    generation: int | None


@dataclass(frozen=True)
class ReplayResult:
    matches: tuple[str, ...]
    mismatches: Mapping[str, str]  # path -> reason
    timeline: tuple[TimelineEntry, ...]

    @property
    def clean(self) -> bool:
        return not self.mismatches

    def to_dict(self) -> dict:
        return {
            "clean": self.clean,
            "matches": list(self.matches),
            "mismatches": dict(self.mismatches),
            "timeline": [
                {
                    "commit": t.commit_id,
                    "path": t.path,
                    "phase": t.phase,
                    "generation": t.generation,
                }
                for t in self.timeline
            ],
        }


def _tracked_prefix(path: str) -> bool:
    return path.startswith(f"{RESOURCES_DIR}/") or path.startswith(f"{ARCHIVE_DIR}/")


def replay_history(handle: RepoHandle) -> ReplayResult:
    """Rebuild every resource document from history diffs alone and compare
    byte-for-byte with the current checkout under resources/ and archive/."""
    states: dict[str, dict[str, bytes]] = {}
    tip = None
    timeline: list[TimelineEntry] = []
    for sha in rev_list(handle.root, handle.branch):
        parents = commit_info(handle.root, sha)[0]
        base = dict(states.get(parents[0], {})) if parents else {}
        for status, path in commit_changed_paths(handle.root, sha, parents):
            if status == "D":
                base.pop(path, None)
            else:
                blob = show_blob(handle.root, sha, path)
                if blob is not None:
                    base[path] = blob
            if is_resource_document(path):
                phase = generation = None
                if status != "D" and path in base:
                    try:
                        doc = parse_resource(base[path])
                        phase = doc.status.phase.value if doc.status else None
                        generation = doc.metadata.generation
                    except GiterError:
                        pass
                timeline.append(TimelineEntry(sha, path, phase, generation))
        states[sha] = base
        tip = sha

    replayed = {
        path: blob for path, blob in (states.get(tip, {}) if tip else {}).items()
        if _tracked_prefix(path)
    }

    worktree: dict[str, bytes] = {}
    for prefix in (RESOURCES_DIR, ARCHIVE_DIR):
        root = handle.root / prefix
        if not root.is_dir():
            continue
        for file_path in sorted(root.rglob("*")):
            if file_path.is_file():
                rel = file_path.relative_to(handle.root).as_posix()
                worktree[rel] = file_path.read_bytes()

    matches = []
    mismatches: dict[str, str] = {}
    for path in sorted(set(replayed) | set(worktree)):
        if path not in worktree:
            mismatches[path] = "present in history, missing from the checkout"
        elif path not in replayed:
            mismatches[path] = "present in the checkout, never committed"
        elif replayed[path] != worktree[path]:
            mismatches[path] = "checkout content differs from replayed history"
        else:
            matches.append(path)
    return ReplayResult(tuple(matches), mismatches, tuple(timeline))
