"""Repository layout and Git transport for exchange resources.

Layout (bit-exact):
    resources/<namespace>/<kind lowercase>/<name>.yaml
    archive/<namespace>/<kind>/<name>/<utc-stamp>-<short-commit>.yaml
    .giter/schemas/<kind lowercase>.schema.yaml
    .giter/policy.yaml

Every commit this module creates touches exactly one resource file (archival
additionally removes the live file) and carries machine-readable trailers, so
history can be audited and replayed per resource. A handle wraps one working
clone and is confined to one logical thread of control; actors coordinate
only through the shared remote.
"""

from __future__ import annotations

import random
import re
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping

from .canonical import emit_document, load_document
from .clock import Clock, format_compact_timestamp
from .errors import (
    AlreadyInitialized,
    GiterError,
    IdentifierError,
    MergeConflict,
    NotTerminal,
    NothingToCommit,
    OwnershipViolation,
    ParseError,
    PushExhausted,
    RemoteUnavailable,
    StructureError,
    ValidationFailed,
)
from .gitutil import (
    commit_changed_paths,
    commit_info,
    diff_name_status,
    git_out,
    identity_env,
    is_ancestor,
    merge_base,
    parse_trailers,
    rev_list,
    rev_parse,
    run_git,
    show_blob,
)
from .ownership import (
    ChangeClass,
    ChangeKind,
    OwnershipPolicy,
    Role,
    check_permitted,
    classify,
    merge_resources,
)
from .resource import (
    ExchangeResource,
    Phase,
    canonical_serialize,
    parse_resource,
    transition_phase,
    validate_identifier,
)
from .schema import SchemaDefinition, load_schemas, validate_resource

RESOURCES_DIR = "resources"
ARCHIVE_DIR = "archive"
GITER_DIR = ".giter"
POLICY_FILE = ".giter/policy.yaml"
SCHEMAS_DIR = ".giter/schemas"

VERBS = ("create", "update", "status", "archive", "merge")
_SUBJECT_RE = re.compile(
    r"^giter\((producer|consumer)\): (create|update|status|archive|merge) (\S+) gen=(\d+)$"
)
_REJECTED_MARKERS = ("[rejected]", "non-fast-forward", "fetch first", "failed to push")

DEFAULT_POLICY_DOC = {"identities": [], "unknownIdentity": "flag", "seedStatusAllowed": True}
_INIT_SUBJECT = "init: repository layout"


@dataclass(frozen=True)
class Identity:
    display_name: str
    email: str
    role: Role

    def __post_init__(self):
        if not self.email:
            raise IdentifierError("identity email must be non-empty")
        object.__setattr__(self, "role", Role(self.role))


INIT_IDENTITY = Identity("giter-init", "init@giter.invalid", Role.PRODUCER)


@dataclass
class Backoff:
    """Exponential backoff with full jitter: uniform(0, min(cap, base*factor^n))."""

    base: float = 0.2
    factor: float = 2.0
    cap: float = 5.0
    rng: random.Random = field(default_factory=random.Random)
    sleeper: Callable[[float], None] = time.sleep

    def delay(self, attempt: int) -> float:
        bound = min(self.cap, self.base * self.factor ** max(0, attempt - 1))
        return self.rng.uniform(0.0, bound) if bound > 0 else 0.0

    def pause(self, attempt: int) -> None:
        delay = self.delay(attempt)
        if delay > 0:
            self.sleeper(delay)


def no_backoff() -> Backoff:
    return Backoff(base=0.0, cap=0.0, sleeper=lambda _seconds: None)


@dataclass
class RepoHandle:
    """One actor's exclusive working clone (or the bare shared remote)."""

    root: Path
    branch: str
    identity: Identity
    clock: Clock = field(default_factory=Clock)
    backoff: Backoff = field(default_factory=Backoff)
    remote_name: str = "origin"
    bare: bool = False
    offline: bool = False

    def _require_worktree(self) -> None:
        if self.bare:
            raise GiterError("operation requires a working clone, not a bare repository")

    def worktree_file(self, rel_path: str) -> Path:
        return self.root / rel_path


@dataclass(frozen=True)
class SyncReport:
    new_commits: int
    tip: str | None
    fast_forwarded: bool = False
    diverged: bool = False
    no_remote: bool = False


@dataclass(frozen=True)
class Diagnostic:
    path: str
    kind: str  # parse | validation | layout
    message: str


@dataclass(frozen=True)
class ReadResult:
    resources: Mapping[str, ExchangeResource]
    diagnostics: tuple[Diagnostic, ...] = ()

    def by_ref(self) -> dict[str, ExchangeResource]:
        return {r.ref: r for r in self.resources.values()}

    @property
    def flagged_paths(self) -> frozenset[str]:
        return frozenset(d.path for d in self.diagnostics)


@dataclass(frozen=True)
class CommitRecord:
    commit_id: str
    parents: tuple[str, ...]
    author_name: str
    author_email: str
    timestamp: datetime
    message: str
    trailers: Mapping[str, str]
    touched_paths: tuple[str, ...]
    foreign: bool
    role: str | None = None
    verb: str | None = None
    resource_ref: str | None = None
    generation: int | None = None
    change_class: ChangeClass | None = None

    @property
    def is_merge(self) -> bool:
        return len(self.parents) > 1

    @property
    def subject(self) -> str:
        return self.message.splitlines()[0] if self.message else ""


@dataclass(frozen=True)
class PushReport:
    attempts: int
    pushed: bool
    merged_paths: tuple[str, ...] = ()
    no_remote: bool = False


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


def resource_path(namespace: str, kind: str, name: str) -> str:
    """`resources/<namespace>/<kind lowercase>/<name>.yaml`; injective."""
    validate_identifier(namespace, "namespace")
    validate_identifier(name, "name")
    if not kind or not re.match(r"^[A-Za-z][A-Za-z0-9]*$", kind):
        raise IdentifierError(f"invalid kind {kind!r}")
    return f"{RESOURCES_DIR}/{namespace}/{kind.lower()}/{name}.yaml"


def archive_dir(namespace: str, kind: str, name: str) -> str:
    validate_identifier(namespace, "namespace")
    validate_identifier(name, "name")
    return f"{ARCHIVE_DIR}/{namespace}/{kind.lower()}/{name}"


def resource_path_for(resource: ExchangeResource) -> str:
    return resource_path(resource.metadata.namespace, resource.kind, resource.metadata.name)


def parse_ref(ref: str) -> tuple[str, str, str]:
    """Split `<namespace>/<kind>/<name>` into its parts."""
    parts = ref.split("/")
    if len(parts) != 3 or not all(parts):
        raise IdentifierError(f"invalid resource reference {ref!r}; want ns/kind/name")
    return parts[0], parts[1], parts[2]


def schema_file_path(kind: str) -> str:
    return f"{SCHEMAS_DIR}/{kind.lower()}.schema.yaml"


def is_resource_document(path: str) -> bool:
    if not path.endswith(".yaml"):
        return False
    return path.startswith(f"{RESOURCES_DIR}/") or path.startswith(f"{ARCHIVE_DIR}/")


# ---------------------------------------------------------------------------
# Initialization / cloning
# ---------------------------------------------------------------------------


def _write_skeleton(root: Path) -> list[str]:
    paths = []
    for rel in (f"{RESOURCES_DIR}/.gitkeep", f"{ARCHIVE_DIR}/.gitkeep", f"{SCHEMAS_DIR}/.gitkeep"):
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("")
        paths.append(rel)
    policy = root / POLICY_FILE
    policy.write_text(
        emit_document(DEFAULT_POLICY_DOC, ("identities", "unknownIdentity", "seedStatusAllowed"))
    )
    paths.append(POLICY_FILE)
    return paths


def init_repo(
    location: Path | str,
    branch: str = "main",
    *,
    bare: bool = False,
    identity: Identity | None = None,
    clock: Clock | None = None,
    backoff: Backoff | None = None,
) -> RepoHandle:
    """Create a repository with the exchange layout and an initial commit.

    ``bare=True`` builds the shared remote; actors then clone it. Otherwise a
    standalone working repository is produced.
    """
    location = Path(location).resolve()
    if location.exists() and any(location.iterdir()):
        raise AlreadyInitialized(f"{location} already exists and is not empty")
    identity = identity or INIT_IDENTITY
    clock = clock or Clock()
    location.mkdir(parents=True, exist_ok=True)
    env = identity_env(identity.display_name, identity.email, clock.now())

    if bare:
        run_git(location, "init", "--bare", "-b", branch, ".")
        with tempfile.TemporaryDirectory(prefix="giter-init-") as seed_dir:
            seed = Path(seed_dir)
            run_git(seed, "init", "-b", branch, ".")
            run_git(seed, "remote", "add", "origin", str(location))
            _write_skeleton(seed)
            run_git(seed, "add", "-A")
            run_git(seed, "commit", "-F", "-", env=env, input_bytes=_INIT_SUBJECT.encode())
            run_git(seed, "push", "origin", f"{branch}:{branch}")
        return RepoHandle(
            root=location,
            branch=branch,
            identity=identity,
            clock=clock,
            backoff=backoff or Backoff(),
            bare=True,
        )

    run_git(location, "init", "-b", branch, ".")
    _write_skeleton(location)
    run_git(location, "add", "-A")
    run_git(location, "commit", "-F", "-", env=env, input_bytes=_INIT_SUBJECT.encode())
    return RepoHandle(
        root=location, branch=branch, identity=identity, clock=clock, backoff=backoff or Backoff()
    )


def _remote_arg(remote: Path | str) -> str:
    """Git URLs pass through; filesystem paths are made absolute."""
    text = str(remote)
    if "://" in text or text.startswith("git@"):
        return text
    return str(Path(remote).resolve())


def clone_repo(
    remote: Path | str,
    workdir: Path | str,
    identity: Identity,
    branch: str = "main",
    *,
    clock: Clock | None = None,
    backoff: Backoff | None = None,
) -> RepoHandle:
    """Clone the shared remote into an actor's exclusive working directory."""
    workdir = Path(workdir)
    if workdir.exists() and any(workdir.iterdir()):
        raise AlreadyInitialized(f"{workdir} already exists and is not empty")
    workdir.parent.mkdir(parents=True, exist_ok=True)
    result = run_git(
        workdir.parent,
        "clone",
        "--branch",
        branch,
        "--",
        _remote_arg(remote),
        str(workdir),
        check=False,
    )
    if result.returncode != 0:
        raise RemoteUnavailable(result.stderr.decode("utf-8", "replace").strip())
    return RepoHandle(
        root=workdir,
        branch=branch,
        identity=identity,
        clock=clock or Clock(),
        backoff=backoff or Backoff(),
    )


def open_repo(
    path: Path | str,
    identity: Identity,
    branch: str | None = None,
    *,
    clock: Clock | None = None,
    backoff: Backoff | None = None,
) -> RepoHandle:
    """Open an existing working clone."""
    path = Path(path)
    result = run_git(path, "rev-parse", "--is-bare-repository", check=False)
    if result.returncode != 0:
        raise GiterError(f"{path} is not a git repository")
    bare = result.stdout.decode().strip() == "true"
    if branch is None:
        branch = git_out(path, "symbolic-ref", "--short", "HEAD") if not bare else "main"
    return RepoHandle(
        root=path,
        branch=branch,
        identity=identity,
        clock=clock or Clock(),
        backoff=backoff or Backoff(),
        bare=bare,
    )


def _has_remote(handle: RepoHandle) -> bool:
    remotes = git_out(handle.root, "remote").splitlines()
    return handle.remote_name in remotes


# ---------------------------------------------------------------------------
# Sync and reads
# ---------------------------------------------------------------------------


def fetch(handle: RepoHandle) -> SyncReport:
    """Update the local view to the remote tip (fast-forward only).

    Raises RemoteUnavailable when the remote cannot be reached; callers treat
    that as "skip this cycle".
    """
    handle._require_worktree()
    if handle.offline:
        raise RemoteUnavailable("actor is offline")
    if not _has_remote(handle):
        return SyncReport(new_commits=0, tip=rev_parse(handle.root, "HEAD"), no_remote=True)
    tracking_ref = f"refs/remotes/{handle.remote_name}/{handle.branch}"
    result = run_git(
        handle.root,
        "fetch",
        handle.remote_name,
        f"+refs/heads/{handle.branch}:{tracking_ref}",
        check=False,
    )
    if result.returncode != 0:
        raise RemoteUnavailable(result.stderr.decode("utf-8", "replace").strip())
    local = rev_parse(handle.root, "HEAD")
    tracking = rev_parse(handle.root, tracking_ref)
    new_commits = 0
    fast_forwarded = False
    diverged = False
    if tracking and tracking != local:
        new_commits = int(git_out(handle.root, "rev-list", "--count", f"HEAD..{tracking}"))
        if is_ancestor(handle.root, local or tracking, tracking):
            run_git(handle.root, "merge", "--ff-only", tracking)
            fast_forwarded = True
        elif not is_ancestor(handle.root, tracking, local):
            diverged = True
    return SyncReport(
        new_commits=new_commits,
        tip=rev_parse(handle.root, "HEAD"),
        fast_forwarded=fast_forwarded,
        diverged=diverged,
    )


def load_registry(handle: RepoHandle) -> dict[str, SchemaDefinition]:
    """Schema registry from the checked-out `.giter/schemas/` directory."""
    handle._require_worktree()
    schema_root = handle.root / SCHEMAS_DIR
    files: dict[str, bytes] = {}
    if schema_root.is_dir():
        for path in sorted(schema_root.glob("*.schema.yaml")):
            files[f"{SCHEMAS_DIR}/{path.name}"] = path.read_bytes()
    return load_schemas(files)


def load_ownership_policy(handle: RepoHandle) -> OwnershipPolicy:
    """Ownership policy knobs from the checked-out `.giter/policy.yaml`."""
    policy_file = handle.root / POLICY_FILE
    if not policy_file.is_file():
        return OwnershipPolicy()
    tree = load_document(policy_file.read_bytes())
    if not isinstance(tree, dict):
        return OwnershipPolicy()
    seed = tree.get("seedStatusAllowed", True)
    return OwnershipPolicy(seed_status_allowed=bool(seed))


def read_all(
    handle: RepoHandle, registry: Mapping[str, SchemaDefinition] | None = None
) -> ReadResult:
    """Parse every live resource file, collecting per-file diagnostics.

    A malformed file never hides the valid ones; resources whose file path
    disagrees with their declared identity are reported and excluded.
    """
    handle._require_worktree()
    if registry is None:
        registry = load_registry(handle)
    resources: dict[str, ExchangeResource] = {}
    diagnostics: list[Diagnostic] = []
    root = handle.root / RESOURCES_DIR
    if not root.is_dir():
        return ReadResult({}, ())
    for file_path in sorted(root.rglob("*.yaml")):
        rel = file_path.relative_to(handle.root).as_posix()
        try:
            resource = parse_resource(file_path.read_bytes())
        except (ParseError, StructureError, IdentifierError) as exc:
            diagnostics.append(Diagnostic(rel, "parse", str(exc)))
            continue
        expected = resource_path_for(resource)
        if expected != rel:
            diagnostics.append(
                Diagnostic(rel, "layout", f"document identity maps to {expected}, found at {rel}")
            )
            continue
        report = validate_resource(resource, registry)
        if not report.ok:
            diagnostics.append(
                Diagnostic(rel, "validation", "; ".join(v.render() for v in report.violations))
            )
        resources[rel] = resource
    return ReadResult(resources, tuple(diagnostics))


# ---------------------------------------------------------------------------
# Commits
# ---------------------------------------------------------------------------


def build_commit_message(role: Role, verb: str, ref: str, generation: int) -> str:
    if verb not in VERBS:
        raise GiterError(f"unknown commit verb {verb!r}")
    subject = f"giter({role.value}): {verb} {ref} gen={generation}"
    trailers = (
        f"Giter-Role: {role.value}\n"
        f"Giter-Resource: {ref}\n"
        f"Giter-Generation: {generation}"
    )
    return f"{subject}\n\n{trailers}\n"


def _record_for(handle: RepoHandle, sha: str) -> CommitRecord:
    parents, name, email, when, message = commit_info(handle.root, sha)
    trailers = parse_trailers(message)
    touched = tuple(path for _status, path in commit_changed_paths(handle.root, sha, parents))
    foreign = not any(key.startswith("Giter-") for key in trailers)
    role = verb = ref = None
    generation = None
    match = _SUBJECT_RE.match(message.splitlines()[0] if message else "")
    if match:
        role, verb, ref, generation = (
            match.group(1),
            match.group(2),
            match.group(3),
            int(match.group(4)),
        )
    return CommitRecord(
        commit_id=sha,
        parents=tuple(parents),
        author_name=name,
        author_email=email,
        timestamp=datetime.fromtimestamp(when, tz=timezone.utc),
        message=message,
        trailers=trailers,
        touched_paths=touched,
        foreign=foreign,
        role=role,
        verb=verb,
        resource_ref=ref,
        generation=generation,
    )


def _commit_staged(handle: RepoHandle, message: str) -> str:
    env = identity_env(
        handle.identity.display_name, handle.identity.email, handle.clock.now()
    )
    run_git(handle.root, "commit", "-F", "-", env=env, input_bytes=message.encode("utf-8"))
    sha = rev_parse(handle.root, "HEAD")
    assert sha is not None
    return sha


def commit_resource(handle: RepoHandle, resource: ExchangeResource, verb: str) -> CommitRecord:
    """Validate, authorize and commit one resource document (no push)."""
    handle._require_worktree()
    registry = load_registry(handle)
    report = validate_resource(resource, registry)
    if not report.ok:
        raise ValidationFailed(
            f"{resource.ref} does not validate: "
            + "; ".join(v.render() for v in report.violations),
            report.violations,
        )
    rel = resource_path_for(resource)
    target = handle.root / rel
    old = parse_resource(target.read_bytes()) if target.is_file() else None
    change = classify(old, resource)
    if change.kind is ChangeKind.NO_CHANGE:
        raise NothingToCommit(f"{resource.ref} is unchanged")
    verdict = check_permitted(handle.identity.role, change, load_ownership_policy(handle))
    if not verdict.allowed:
        raise OwnershipViolation(
            f"{handle.identity.role.value} may not apply a {change.kind.value} change to "
            f"{resource.ref}: " + "; ".join(verdict.reasons),
            verdict.reasons,
        )
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(canonical_serialize(resource))
    run_git(handle.root, "add", "-A", "--", rel)
    message = build_commit_message(handle.identity.role, verb, resource.ref, resource.metadata.generation)
    sha = _commit_staged(handle, message)
    return _record_for(handle, sha)


def archive_resource(handle: RepoHandle, resource: ExchangeResource) -> CommitRecord:
    """Move a terminal resource under archive/ with phase rewritten to Archived."""
    handle._require_worktree()
    if handle.identity.role is not Role.PRODUCER:
        raise OwnershipViolation("only the producer archives resources")
    if resource.status is None or resource.status.phase not in (Phase.COMPLETED, Phase.FAILED):
        raise NotTerminal(f"{resource.ref} is not in a terminal phase")
    live_rel = resource_path_for(resource)
    live = handle.root / live_rel
    if not live.is_file():
        raise GiterError(f"live file {live_rel} not found")
    short = git_out(handle.root, "log", "-1", "--format=%h", "--", live_rel) or git_out(
        handle.root, "rev-parse", "--short", "HEAD"
    )
    now = handle.clock.now()
    archived_status = transition_phase(resource.status, Phase.ARCHIVED, at=now)
    archived = resource.with_status(archived_status)
    archive_rel = (
        f"{archive_dir(resource.metadata.namespace, resource.kind, resource.metadata.name)}/"
        f"{format_compact_timestamp(now)}-{short}.yaml"
    )
    target = handle.root / archive_rel
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(canonical_serialize(archived))
    live.unlink()
    run_git(handle.root, "add", "-A", "--", live_rel, archive_rel)
    message = build_commit_message(
        handle.identity.role, "archive", resource.ref, resource.metadata.generation
    )
    sha = _commit_staged(handle, message)
    return _record_for(handle, sha)


# ---------------------------------------------------------------------------
# Push with merge-on-race
# ---------------------------------------------------------------------------

MergeFn = Callable[
    [ExchangeResource | None, ExchangeResource, ExchangeResource], ExchangeResource
]


def _default_merge_fn(handle: RepoHandle) -> MergeFn:
    policy = load_ownership_policy(handle)
    registry = load_registry(handle)

    def merge(base, ours, theirs):
        return merge_resources(base, ours, theirs, policy, registry)

    return merge


def _parse_for_merge(blob: bytes | None, path: str, side: str) -> ExchangeResource | None:
    if blob is None:
        return None
    try:
        return parse_resource(blob)
    except (ParseError, StructureError, IdentifierError) as exc:
        raise MergeConflict(f"{side} version of {path} is unparseable: {exc}", path=path)


def _merge_subject_target(
    handle: RepoHandle, plan_docs: dict[str, bytes], local: str
) -> tuple[str, int]:
    for path, blob in sorted(plan_docs.items()):
        try:
            doc = parse_resource(blob)
            return doc.ref, doc.metadata.generation
        except GiterError:
            continue
    record = _record_for(handle, local)
    if record.resource_ref is not None and record.generation is not None:
        return record.resource_ref, record.generation
    return "default/repo/merge", 0


def _merge_with_remote(handle: RepoHandle, merge_fn: MergeFn) -> tuple[str, ...]:
    """Combine local commits with the fetched remote tip into a merge commit.

    Per section three-way merge for resource files contested on both sides;
    everything else must be single-sided or identical.
    """
    local = rev_parse(handle.root, "HEAD")
    remote = rev_parse(handle.root, f"refs/remotes/{handle.remote_name}/{handle.branch}")
    if local is None or remote is None or local == remote:
        return ()
    if is_ancestor(handle.root, remote, local):
        return ()
    if is_ancestor(handle.root, local, remote):
        run_git(handle.root, "reset", "--hard", remote)
        return ()
    base = merge_base(handle.root, local, remote)
    if base is None:
        raise MergeConflict("local and remote histories are unrelated")

    ours_changes = {path: status for status, path in diff_name_status(handle.root, base, local)}
    theirs_changes = {path: status for status, path in diff_name_status(handle.root, base, remote)}

    plan: dict[str, bytes | None] = {}
    merged_paths: list[str] = []
    resource_docs: dict[str, bytes] = {}
    for path, status in ours_changes.items():
        ours_blob = None if status == "D" else show_blob(handle.root, local, path)
        if path not in theirs_changes:
            plan[path] = ours_blob
            if ours_blob is not None and is_resource_document(path):
                resource_docs[path] = ours_blob
            continue
        theirs_status = theirs_changes[path]
        theirs_blob = None if theirs_status == "D" else show_blob(handle.root, remote, path)
        if ours_blob == theirs_blob:
            continue  # both sides converged on the same content
        if ours_blob is None or theirs_blob is None:
            raise MergeConflict(
                f"{path} was deleted on one side and modified on the other", path=path
            )
        if path.startswith(f"{RESOURCES_DIR}/") and path.endswith(".yaml"):
            base_blob = show_blob(handle.root, base, path)
            merged = merge_fn(
                _parse_for_merge(base_blob, path, "base"),
                _parse_for_merge(ours_blob, path, "local"),
                _parse_for_merge(theirs_blob, path, "remote"),
            )
            blob = canonical_serialize(merged)
            plan[path] = blob
            resource_docs[path] = blob
            merged_paths.append(path)
        else:
            raise MergeConflict(f"both sides changed non-resource file {path}", path=path)

    if not plan:
        # Everything we had is already on the remote.
        run_git(handle.root, "reset", "--hard", remote)
        return ()

    with tempfile.NamedTemporaryFile(prefix="giter-index-") as index_file:
        env = {"GIT_INDEX_FILE": index_file.name}
        run_git(handle.root, "read-tree", remote, env=env)
        for path, content in sorted(plan.items()):
            if content is None:
                run_git(handle.root, "update-index", "--force-remove", "--", path, env=env)
            else:
                oid = git_out(handle.root, "hash-object", "-w", "--stdin", input_bytes=content)
                run_git(
                    handle.root,
                    "update-index",
                    "--add",
                    "--cacheinfo",
                    f"100644,{oid},{path}",
                    env=env,
                )
        tree = git_out(handle.root, "write-tree", env=env)

    ref, generation = _merge_subject_target(handle, resource_docs, local)
    message = build_commit_message(handle.identity.role, "merge", ref, generation)
    env = identity_env(handle.identity.display_name, handle.identity.email, handle.clock.now())
    merge_sha = git_out(
        handle.root,
        "commit-tree",
        tree,
        "-p",
        local,
        "-p",
        remote,
        env=env,
        input_bytes=message.encode("utf-8"),
    )
    run_git(handle.root, "update-ref", f"refs/heads/{handle.branch}", merge_sha)
    run_git(handle.root, "reset", "--hard", f"refs/heads/{handle.branch}")
    return tuple(merged_paths)


def push_with_retry(
    handle: RepoHandle, max_attempts: int = 5, merge_fn: MergeFn | None = None
) -> PushReport:
    """Push local commits; on a non-fast-forward rejection, fetch, merge the
    contested resource files section-wise, and retry with backoff."""
    handle._require_worktree()
    if handle.offline:
        raise RemoteUnavailable("actor is offline")
    if not _has_remote(handle):
        return PushReport(attempts=0, pushed=False, no_remote=True)
    tracking = rev_parse(handle.root, f"refs/remotes/{handle.remote_name}/{handle.branch}")
    if tracking is not None and tracking == rev_parse(handle.root, "HEAD"):
        return PushReport(attempts=0, pushed=False)
    merge_fn = merge_fn or _default_merge_fn(handle)
    merged_paths: list[str] = []
    for attempt in range(1, max_attempts + 1):
        result = run_git(
            handle.root,
            "push",
            handle.remote_name,
            f"{handle.branch}:{handle.branch}",
            check=False,
        )
        if result.returncode == 0:
            return PushReport(attempts=attempt, pushed=True, merged_paths=tuple(merged_paths))
        stderr = result.stderr.decode("utf-8", "replace")
        if not any(marker in stderr for marker in _REJECTED_MARKERS):
            raise RemoteUnavailable(stderr.strip())
        if attempt == max_attempts:
            break
        handle.backoff.pause(attempt)
        fetch_result = run_git(
            handle.root,
            "fetch",
            handle.remote_name,
            f"+refs/heads/{handle.branch}:refs/remotes/{handle.remote_name}/{handle.branch}",
            check=False,
        )
        if fetch_result.returncode != 0:
            raise RemoteUnavailable(fetch_result.stderr.decode("utf-8", "replace").strip())
        merged_paths.extend(_merge_with_remote(handle, merge_fn))
    raise PushExhausted(f"push rejected after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------


def history(
    handle: RepoHandle,
    resource_selector: str | tuple[str, str, str] | None = None,
) -> list[CommitRecord]:
    """Commits touching the selected resource (or all), oldest first."""
    paths: list[str] | None = None
    live_path: str | None = None
    if resource_selector is not None:
        if isinstance(resource_selector, str):
            namespace, kind, name = parse_ref(resource_selector)
        else:
            namespace, kind, name = resource_selector
        live_path = resource_path(namespace, kind, name)
        paths = [live_path, archive_dir(namespace, kind, name)]
    records = []
    for sha in rev_list(handle.root, handle.branch, paths):
        record = _record_for(handle, sha)
        if live_path is not None:
            record = _with_change_class(handle, record, live_path)
        records.append(record)
    return records


def _with_change_class(handle: RepoHandle, record: CommitRecord, path: str) -> CommitRecord:
    from dataclasses import replace as dc_replace

    parent = record.parents[0] if record.parents else None
    old_blob = show_blob(handle.root, parent, path) if parent else None
    new_blob = show_blob(handle.root, record.commit_id, path)
    if old_blob is None and new_blob is None:
        return record
    try:
        old = parse_resource(old_blob) if old_blob is not None else None
        new = parse_resource(new_blob) if new_blob is not None else None
    except GiterError:
        return record
    return dc_replace(record, change_class=classify(old, new))


def read_resource(handle: RepoHandle, ref: str) -> ExchangeResource | None:
    """The checked-out live document for a reference, or None."""
    handle._require_worktree()
    namespace, kind, name = parse_ref(ref)
    target = handle.root / resource_path(namespace, kind, name)
    if not target.is_file():
        return None
    return parse_resource(target.read_bytes())


def latest_archive(handle: RepoHandle, ref: str) -> ExchangeResource | None:
    """Most recent archived document for a reference, or None."""
    namespace, kind, name = parse_ref(ref)
    directory = handle.root / archive_dir(namespace, kind, name)
    if not directory.is_dir():
        return None
    files = sorted(directory.glob("*.yaml"))
    if not files:
        return None
    return parse_resource(files[-1].read_bytes())
