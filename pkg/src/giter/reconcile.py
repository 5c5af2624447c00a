"""Producer and consumer polling loops, plus the external handler protocol.

Each reconcile-once call is memoryless: a pure function of the repository
state and (for producers) the desired set, which keeps replay semantics
clean. Loops never share a handle; all coordination happens through Git.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from random import Random
from typing import Any, Callable, Mapping, Sequence

from .clock import ensure_utc, format_timestamp
from .errors import (
    GiterError,
    HandlerSpawnError,
    HandlerTimeout,
    MergeConflict,
    PushExhausted,
    RemoteUnavailable,
)
from .ownership import Role
from .resource import (
    ExchangeResource,
    Phase,
    ResourceMetadata,
    ResourceStatus,
    check_value_tree,
    normalize_value_tree,
)
from .store import (
    RepoHandle,
    archive_resource,
    commit_resource,
    fetch,
    push_with_retry,
    read_all,
)

DEFAULT_HANDLER_TIMEOUT = 60.0
DEFAULT_STALE_AFTER = timedelta(seconds=600)


@dataclass(frozen=True)
class DesiredResource:
    """A producer-side declaration: the spec that should exist."""

    resource: ExchangeResource
    auto_archive: bool = False

    def __post_init__(self):
        if self.resource.status is not None:
            raise GiterError("desired resources are declared status-free")


@dataclass(frozen=True)
class DesiredSet:
    entries: tuple[DesiredResource, ...] = ()

    def __post_init__(self):
        refs = [entry.resource.ref for entry in self.entries]
        if len(refs) != len(set(refs)):
            raise GiterError("desired set contains duplicate resource references")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class HandlerRequest:
    api_version: str
    kind: str
    metadata: ResourceMetadata
    spec: Mapping[str, Any]

    @classmethod
    def of(cls, resource: ExchangeResource) -> "HandlerRequest":
        return cls(resource.api_version, resource.kind, resource.metadata, resource.spec)

    def to_payload(self) -> dict:
        metadata = {
            "name": self.metadata.name,
            "namespace": self.metadata.namespace,
            "generation": self.metadata.generation,
            "labels": dict(self.metadata.labels),
            "annotations": dict(self.metadata.annotations),
            "createdAt": format_timestamp(self.metadata.created_at)
            if self.metadata.created_at
            else None,
        }
        return {
            "apiVersion": self.api_version,
            "kind": self.kind,
            "metadata": metadata,
            "spec": self.spec,
        }


@dataclass(frozen=True)
class HandlerOutcome:
    phase: Phase
    result: Mapping[str, Any] = field(default_factory=dict)
    message: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.phase not in (Phase.COMPLETED, Phase.FAILED):
            raise GiterError("handler outcomes are Completed or Failed")
        if self.phase is Phase.FAILED and not self.message:
            raise GiterError("a Failed outcome requires a message")
        check_value_tree(dict(self.result), "result")


HandlerFn = Callable[[HandlerRequest], HandlerOutcome]


@dataclass(frozen=True)
class ReconcileAction:
    resource_ref: str
    action: str  # created | spec-updated | archived | status-updated |
    #              skipped-current | skipped-offline | handler-failed
    detail: str = ""


@dataclass(frozen=True)
class ReconcileReport:
    at: datetime
    actor: str
    actions: tuple[ReconcileAction, ...] = ()
    push_attempts: int = 0
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "at": format_timestamp(self.at),
            "actor": self.actor,
            "actions": [
                {"resource": a.resource_ref, "action": a.action, "detail": a.detail}
                for a in self.actions
            ],
            "pushAttempts": self.push_attempts,
            "diagnostics": list(self.diagnostics),
        }


def _offline_report(
    handle: RepoHandle, refs: Sequence[str], reason: str
) -> ReconcileReport:
    return ReconcileReport(
        at=handle.clock.now(),
        actor=handle.identity.email,
        actions=tuple(ReconcileAction(ref, "skipped-offline", reason) for ref in refs),
        diagnostics=(f"remote unavailable: {reason}",),
    )


# ---------------------------------------------------------------------------
# Producer loop
# ---------------------------------------------------------------------------


def producer_reconcile_once(
    handle: RepoHandle, desired: DesiredSet, *, push: bool = True
) -> ReconcileReport:
    """Create missing resources, roll spec changes forward, archive done work.

    An unreachable remote records every desired resource as skipped-offline
    and is not an error; the next cycle simply tries again.
    """
    if handle.identity.role is not Role.PRODUCER:
        raise GiterError("producer_reconcile_once requires a producer handle")
    try:
        fetch(handle)
    except RemoteUnavailable as exc:
        return _offline_report(handle, [d.resource.ref for d in desired], str(exc))

    state = read_all(handle)
    current = state.by_ref()
    actions: list[ReconcileAction] = []
    diagnostics = [f"{d.path}: {d.message}" for d in state.diagnostics]
    wrote = False

    for entry in desired:
        declared = entry.resource
        existing = current.get(declared.ref)
        try:
            if existing is None:
                seeded = _seed_resource(handle, declared)
                commit_resource(handle, seeded, "create")
                actions.append(ReconcileAction(declared.ref, "created", "gen=1"))
                wrote = True
            elif existing.api_version != declared.api_version:
                diagnostics.append(
                    f"{declared.ref}: apiVersion is immutable; cannot reconcile in place"
                )
                actions.append(ReconcileAction(declared.ref, "skipped-current", "apiVersion drift"))
            elif existing.spec != declared.spec:
                updated = existing.with_spec(
                    declared.spec, generation=existing.metadata.generation + 1
                )
                commit_resource(handle, updated, "update")
                actions.append(
                    ReconcileAction(
                        declared.ref, "spec-updated", f"gen={updated.metadata.generation}"
                    )
                )
                wrote = True
            elif (
                entry.auto_archive
                and existing.status is not None
                and existing.status.phase is Phase.COMPLETED
                and existing.status.observed_generation == existing.metadata.generation
            ):
                archive_resource(handle, existing)
                actions.append(ReconcileAction(declared.ref, "archived", ""))
                wrote = True
            else:
                actions.append(ReconcileAction(declared.ref, "skipped-current", ""))
        except (PushExhausted, MergeConflict):
            raise
        except GiterError as exc:
            diagnostics.append(f"{declared.ref}: {exc}")
            actions.append(ReconcileAction(declared.ref, "skipped-current", str(exc)))

    attempts = 0
    if push and wrote:
        attempts = push_with_retry(handle, max_attempts=5).attempts
    return ReconcileReport(
        at=handle.clock.now(),
        actor=handle.identity.email,
        actions=tuple(actions),
        push_attempts=attempts,
        diagnostics=tuple(diagnostics),
    )


def _seed_resource(handle: RepoHandle, declared: ExchangeResource) -> ExchangeResource:
    from .store import load_ownership_policy

    metadata = replace(declared.metadata, generation=1, created_at=handle.clock.now())
    seeded = replace(declared, metadata=metadata)
    if load_ownership_policy(handle).seed_status_allowed:
        seeded = seeded.with_status(ResourceStatus(phase=Phase.PENDING, result={}))
    return seeded


# ---------------------------------------------------------------------------
# Consumer loop
# ---------------------------------------------------------------------------


def _actionable(
    resource: ExchangeResource, now: datetime, stale_after: timedelta
) -> bool:
    status = resource.status
    if status is None or status.phase is Phase.PENDING:
        return True
    if status.phase is Phase.PROCESSING:
        # In-flight marker from a crashed consumer becomes eligible again
        # once it has been quiet for the stale threshold.
        if status.updated_at is None:
            return True
        return now - ensure_utc(status.updated_at) >= stale_after
    # Completed/Failed work against an older spec generation.
    return status.observed_generation < resource.metadata.generation


def consumer_reconcile_once(
    handle: RepoHandle,
    handler: HandlerFn,
    *,
    namespaces: Sequence[str] | None = None,
    kinds: Sequence[str] | None = None,
    stale_after: timedelta = DEFAULT_STALE_AFTER,
    push: bool = True,
) -> ReconcileReport:
    """Process every actionable resource: mark Processing, run the handler,
    write the terminal outcome. Each status write is pushed so observers see
    in-flight work. ``namespaces``/``kinds`` restrict what this consumer
    implements; one consumer per namespace-and-kind is the deployment rule."""
    if handle.identity.role is not Role.CONSUMER:
        raise GiterError("consumer_reconcile_once requires a consumer handle")
    try:
        fetch(handle)
    except RemoteUnavailable as exc:
        return _offline_report(handle, [], str(exc))

    state = read_all(handle)
    actions: list[ReconcileAction] = []
    diagnostics = [f"{d.path}: {d.message}" for d in state.diagnostics]
    push_attempts = 0

    for path in sorted(state.resources):
        resource = state.resources[path]
        if namespaces is not None and resource.metadata.namespace not in namespaces:
            continue
        if kinds is not None and resource.kind not in kinds:
            continue
        if path in state.flagged_paths:
            actions.append(ReconcileAction(resource.ref, "skipped-current", "has diagnostics"))
            continue
        now = handle.clock.now()
        if not _actionable(resource, now, stale_after):
            actions.append(ReconcileAction(resource.ref, "skipped-current", ""))
            continue

        try:
            generation = resource.metadata.generation
            processing = ResourceStatus(
                phase=Phase.PROCESSING,
                result=resource.status.result if resource.status else {},
                observed_generation=generation,
                updated_at=now,
            )
            in_flight = resource.with_status(processing)
            commit_resource(handle, in_flight, "status")
            if push:
                push_attempts = max(push_attempts, push_with_retry(handle).attempts)

            outcome, action = _run_handler(handler, HandlerRequest.of(resource))
            final_status = ResourceStatus(
                phase=outcome.phase,
                result=dict(outcome.result),
                observed_generation=generation,
                message=outcome.message,
                updated_at=handle.clock.now(),
            )
            commit_resource(handle, in_flight.with_status(final_status), "status")
            if push:
                push_attempts = max(push_attempts, push_with_retry(handle).attempts)
            actions.append(ReconcileAction(resource.ref, action, f"phase={outcome.phase.value}"))
        except (PushExhausted, MergeConflict):
            raise
        except GiterError as exc:
            diagnostics.append(f"{resource.ref}: {exc}")
            actions.append(ReconcileAction(resource.ref, "skipped-current", str(exc)))

    return ReconcileReport(
        at=handle.clock.now(),
        actor=handle.identity.email,
        actions=tuple(actions),
        push_attempts=push_attempts,
        diagnostics=tuple(diagnostics),
    )


def _run_handler(handler: HandlerFn, request: HandlerRequest) -> tuple[HandlerOutcome, str]:
    try:
        outcome = handler(request)
        if not isinstance(outcome, HandlerOutcome):
            raise GiterError("handler returned a non-outcome value")
        return outcome, "status-updated"
    except (HandlerTimeout, HandlerSpawnError, GiterError) as exc:
        return HandlerOutcome(Phase.FAILED, {}, f"handler invocation failed: {exc}"), "handler-failed"
    except Exception as exc:  # a crashing in-process handler must not kill the loop
        return HandlerOutcome(Phase.FAILED, {}, f"handler crashed: {exc}"), "handler-failed"


# ---------------------------------------------------------------------------
# External handler protocol
# ---------------------------------------------------------------------------


def invoke_external_handler(
    command: str | Sequence[str],
    request: HandlerRequest | ExchangeResource,
    timeout: float = DEFAULT_HANDLER_TIMEOUT,
) -> HandlerOutcome:
    """Run a handler process: one JSON object in on stdin, one out on stdout.

    Nonzero exit or malformed output maps to a Failed outcome; a timeout or a
    spawn failure raises so callers can distinguish infrastructure trouble.
    """
    if isinstance(request, ExchangeResource):
        request = HandlerRequest.of(request)
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    payload = json.dumps(request.to_payload()).encode("utf-8")
    try:
        proc = subprocess.run(
            argv, input=payload, capture_output=True, timeout=timeout
        )
    except subprocess.TimeoutExpired as exc:
        raise HandlerTimeout(f"handler exceeded {timeout}s wall clock") from exc
    except (OSError, ValueError) as exc:
        raise HandlerSpawnError(f"cannot spawn handler {argv!r}: {exc}") from exc
    stderr_tail = proc.stderr.decode("utf-8", "replace").strip()[-500:]
    if proc.returncode != 0:
        message = f"handler exited with status {proc.returncode}"
        if stderr_tail:
            message += f": {stderr_tail}"
        return HandlerOutcome(Phase.FAILED, {}, message)
    try:
        reply = json.loads(proc.stdout.decode("utf-8"))
        if not isinstance(reply, dict):
            raise ValueError("reply is not an object")
        phase = Phase(reply["phase"])
        if phase not in (Phase.COMPLETED, Phase.FAILED):
            raise ValueError(f"phase {phase.value} is not a handler outcome")
        result = normalize_value_tree(reply.get("result") or {}, "result")
        if not isinstance(result, dict):
            raise ValueError("result is not an object")
        message = reply.get("message")
        if phase is Phase.FAILED and not message:
            message = "handler reported failure"
        return HandlerOutcome(phase, result, message)
    except (ValueError, KeyError, UnicodeDecodeError, GiterError) as exc:
        return HandlerOutcome(Phase.FAILED, {}, f"malformed handler output: {exc}")


class ExternalHandler:
    """In-process adapter exposing an external command as a HandlerFn."""

    def __init__(self, command: str | Sequence[str], timeout: float = DEFAULT_HANDLER_TIMEOUT):
        self.command = command
        self.timeout = timeout

    def __call__(self, request: HandlerRequest) -> HandlerOutcome:
        return invoke_external_handler(self.command, request, self.timeout)


# ---------------------------------------------------------------------------
# Polling loop
# ---------------------------------------------------------------------------


@dataclass
class LoopConfig:
    interval: float
    jitter_fraction: float = 0.1
    max_cycles: int | None = None
    stop_event: threading.Event | None = None
    rng: Random = field(default_factory=Random)
    sleeper: Callable[[float], None] | None = None

    def __post_init__(self):
        if self.interval <= 0:
            raise GiterError("poll interval must be positive")


def run_loop(
    handle: RepoHandle,
    config: LoopConfig,
    work_fn: Callable[[], ReconcileReport],
    on_report: Callable[[ReconcileReport], None] | None = None,
) -> list[ReconcileReport]:
    """Invoke work_fn every interval +/- jitter until max_cycles or a stop
    signal; per-cycle errors become reports, never loop aborts."""
    reports: list[ReconcileReport] = []
    stop = config.stop_event
    cycle = 0
    while True:
        cycle += 1
        try:
            report = work_fn()
        except GiterError as exc:
            report = ReconcileReport(
                at=handle.clock.now(),
                actor=handle.identity.email,
                diagnostics=(f"cycle error: {exc}",),
            )
        except Exception as exc:
            report = ReconcileReport(
                at=handle.clock.now(),
                actor=handle.identity.email,
                diagnostics=(f"unexpected cycle error: {exc!r}",),
            )
        reports.append(report)
        if on_report is not None:
            on_report(report)
        if config.max_cycles is not None and cycle >= config.max_cycles:
            return reports
        if stop is not None and stop.is_set():
            return reports
        jitter = config.jitter_fraction * config.interval
        delay = max(0.0, config.interval + config.rng.uniform(-jitter, jitter))
        if config.sleeper is not None:
            config.sleeper(delay)
        elif stop is not None:
            if stop.wait(delay):
                return reports
        else:
            threading.Event().wait(delay)
