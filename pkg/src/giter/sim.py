"""Deterministic multi-actor simulation against ephemeral bare remotes.

Steps run one actor's work to completion before the next; races are modeled
by interleaving commit-only and push-only steps, not by wall-clock timing. A
shared logical clock pins every timestamp, so the trace digest is a pure
function of (scenario, seed).
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Any, Mapping, Sequence

from .canonical import emit_document, load_document
from .clock import LogicalClock
from .errors import (
    AssertionFailure,
    GiterError,
    RemoteUnavailable,
    ScenarioError,
)
from .gitutil import identity_env, rev_parse, run_git
from .ownership import Role
from .pipeline import PipelineBinding, parse_bindings, pipeline_reconcile_once
from .policy import TrustPolicy, audit_repo, policy_document, replay_history
from .reconcile import (
    DesiredResource,
    DesiredSet,
    HandlerFn,
    HandlerOutcome,
    HandlerRequest,
    ReconcileAction,
    ReconcileReport,
    consumer_reconcile_once,
    producer_reconcile_once,
    _actionable,
)
from .resource import (
    ExchangeResource,
    Phase,
    ResourceStatus,
    resource_from_tree,
)
from .schema import SchemaDefinition, SchemaNode, schema_definition_from_tree, schema_to_document
from .store import (
    POLICY_FILE,
    RepoHandle,
    clone_repo,
    commit_resource,
    fetch,
    init_repo,
    latest_archive,
    no_backoff,
    push_with_retry,
    read_all,
    schema_file_path,
)

ACTIONS = (
    "reconcile",
    "commit",
    "push",
    "advance-desired",
    "crash",
    "revive",
    "go-offline",
    "go-online",
)
ASSERTION_TYPES = ("converged", "phase-equals", "audit-clean", "replay-clean", "max-push-attempts")

_ADMIN_EMAIL = "admin@sim.invalid"
_FAIL_FIRST_RE = re.compile(r"^fail-first-n\((\d+)\)$")
_SLEEP_RE = re.compile(r"^sleep\((\d+)\)$")


# ---------------------------------------------------------------------------
# Builtin handlers
# ---------------------------------------------------------------------------


def build_handler(spec: str) -> HandlerFn:
    """Builtin consumer behaviors, pure and enumerable so fixed points are
    computable by hand: echo, uppercase-action, fail-always, fail-first-n(n),
    sleep(ms)."""
    if spec == "echo":
        return lambda request: HandlerOutcome(Phase.COMPLETED, dict(request.spec))
    if spec == "uppercase-action":

        def uppercase(request: HandlerRequest) -> HandlerOutcome:
            result = dict(request.spec)
            if isinstance(result.get("action"), str):
                result["action"] = result["action"].upper()
            return HandlerOutcome(Phase.COMPLETED, result)

        return uppercase
    if spec == "fail-always":
        return lambda request: HandlerOutcome(Phase.FAILED, {}, "simulated handler failure")
    match = _FAIL_FIRST_RE.match(spec)
    if match:
        budget = int(match.group(1))
        state = {"count": 0}

        def flaky(request: HandlerRequest) -> HandlerOutcome:
            state["count"] += 1
            if state["count"] <= budget:
                return HandlerOutcome(
                    Phase.FAILED, {}, f"simulated failure {state['count']}/{budget}"
                )
            return HandlerOutcome(Phase.COMPLETED, dict(request.spec))

        return flaky
    match = _SLEEP_RE.match(spec)
    if match:
        millis = int(match.group(1))

        def sleepy(request: HandlerRequest) -> HandlerOutcome:
            time.sleep(millis / 1000.0)
            return HandlerOutcome(Phase.COMPLETED, dict(request.spec))

        return sleepy
    raise ScenarioError(f"unknown builtin handler {spec!r}")


def expected_result(handler_spec: str, spec_tree: Mapping[str, Any]) -> dict | None:
    """Fixed-point oracle for pure builtin handlers; None when unpredictable."""
    if handler_spec in ("echo",) or _SLEEP_RE.match(handler_spec) or _FAIL_FIRST_RE.match(
        handler_spec
    ):
        return dict(spec_tree)
    if handler_spec == "uppercase-action":
        result = dict(spec_tree)
        if isinstance(result.get("action"), str):
            result["action"] = result["action"].upper()
        return result
    return None


# ---------------------------------------------------------------------------
# Scenario model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActorSpec:
    id: str
    role: Role
    email: str
    display_name: str
    namespaces: tuple[str, ...] | None = None
    kinds: tuple[str, ...] | None = None
    handler: str | None = None
    auto_archive: bool = False
    stale_after_seconds: float = 0.0
    revisions: tuple[tuple[ExchangeResource, ...], ...] = ()
    bindings: tuple[PipelineBinding, ...] = ()


@dataclass(frozen=True)
class Step:
    actor: str
    action: str


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    actors: tuple[ActorSpec, ...]
    initial_resources: tuple[ExchangeResource, ...] = ()
    schemas: tuple[SchemaDefinition, ...] = ()
    round_robin_cycles: int | None = None
    steps: tuple[Step, ...] = ()
    assertions: tuple[Mapping[str, Any], ...] = ()
    seed_status_allowed: bool = True
    name: str = "scenario"

    def __post_init__(self):
        ids = [actor.id for actor in self.actors]
        if len(ids) != len(set(ids)):
            raise ScenarioError("actor ids must be unique")
        refs = [r.ref for r in self.initial_resources]
        if len(refs) != len(set(refs)):
            raise ScenarioError("initial resources must have unique references")
        if (self.round_robin_cycles is None) == (not self.steps):
            raise ScenarioError("schedule needs round-robin cycles or an explicit step list")
        known = set(ids)
        for step in self.steps:
            if step.actor not in known:
                raise ScenarioError(f"schedule references unknown actor {step.actor!r}")
            if step.action not in ACTIONS:
                raise ScenarioError(f"unknown schedule action {step.action!r}")
        for assertion in self.assertions:
            if assertion.get("type") not in ASSERTION_TYPES:
                raise ScenarioError(f"unknown assertion type {assertion.get('type')!r}")
        for actor in self.actors:
            if actor.role is Role.CONSUMER and not actor.handler:
                raise ScenarioError(f"consumer {actor.id} needs a handler")


def _parse_actor(entry: Mapping[str, Any], index: int) -> ActorSpec:
    if not isinstance(entry, dict) or "id" not in entry or "role" not in entry:
        raise ScenarioError(f"actors[{index}] must declare id and role")
    try:
        role = Role(entry["role"])
    except ValueError as exc:
        raise ScenarioError(f"actors[{index}]: unknown role {entry['role']!r}") from exc
    actor_id = entry["id"]
    handler = entry.get("handler")
    if handler is not None:
        build_handler(handler)  # validate eagerly
    namespaces = entry.get("namespaces")
    kinds = entry.get("kinds")
    revisions = tuple(
        tuple(resource_from_tree(doc) for doc in revision)
        for revision in entry.get("revisions") or []
    )
    bindings = parse_bindings(entry.get("bindings") or [])
    return ActorSpec(
        id=actor_id,
        role=role,
        email=entry.get("email", f"{actor_id}@sim.invalid"),
        display_name=entry.get("name", actor_id),
        namespaces=tuple(namespaces) if namespaces is not None else None,
        kinds=tuple(kinds) if kinds is not None else None,
        handler=handler,
        auto_archive=bool(entry.get("autoArchive", False)),
        stale_after_seconds=float(entry.get("staleAfterSeconds", 0.0)),
        revisions=revisions,
        bindings=bindings,
    )


def parse_scenario(document: bytes | str | Mapping[str, Any]) -> ScenarioSpec:
    tree = load_document(document) if isinstance(document, (str, bytes)) else document
    if not isinstance(tree, dict):
        raise ScenarioError("scenario document root must be a map")
    unknown = sorted(
        set(tree)
        - {
            "name",
            "seed",
            "actors",
            "initialResources",
            "schemas",
            "schedule",
            "assertions",
            "seedStatusAllowed",
        }
    )
    if unknown:
        raise ScenarioError(f"unknown scenario keys {unknown}")
    try:
        actors = tuple(
            _parse_actor(entry, index) for index, entry in enumerate(tree.get("actors") or [])
        )
        initial = tuple(
            resource_from_tree(doc) for doc in tree.get("initialResources") or []
        )
        schemas = tuple(
            schema_definition_from_tree(doc, f"schemas[{i}]")
            for i, doc in enumerate(tree.get("schemas") or [])
        )
    except GiterError as exc:
        raise ScenarioError(str(exc)) from exc
    schedule = tree.get("schedule") or {}
    cycles = None
    steps: tuple[Step, ...] = ()
    if "roundRobin" in schedule:
        cycles = int(schedule["roundRobin"]["cycles"])
    if "steps" in schedule:
        steps = tuple(Step(s["actor"], s["action"]) for s in schedule["steps"])
    return ScenarioSpec(
        seed=int(tree.get("seed", 0)),
        actors=actors,
        initial_resources=initial,
        schemas=schemas,
        round_robin_cycles=cycles,
        steps=steps,
        assertions=tuple(tree.get("assertions") or []),
        seed_status_allowed=bool(tree.get("seedStatusAllowed", True)),
        name=tree.get("name", "scenario"),
    )


def load_scenario(path: Path | str) -> ScenarioSpec:
    return parse_scenario(Path(path).read_bytes())


def expand_schedule(spec: ScenarioSpec) -> tuple[Step, ...]:
    """Round-robin expands to cycles x actors; the seed shuffles the actor
    order anew each cycle. Explicit step lists pass through unchanged."""
    if spec.steps:
        return spec.steps
    rng = Random(spec.seed)
    ids = [actor.id for actor in spec.actors]
    steps: list[Step] = []
    for _cycle in range(spec.round_robin_cycles or 0):
        order = list(ids)
        rng.shuffle(order)
        steps.extend(Step(actor_id, "reconcile") for actor_id in order)
    return tuple(steps)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimEvent:
    index: int
    actor: str
    action: str
    report_digest: str
    remote_tip: str

    def to_line(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "actor": self.actor,
                "action": self.action,
                "report": self.report_digest,
                "tip": self.remote_tip,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class AssertionOutcome:
    assertion: Mapping[str, Any]
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class SimTrace:
    scenario: str
    seed: int
    events: tuple[SimEvent, ...]
    assertions: tuple[AssertionOutcome, ...]
    remote: Path
    digest: str

    @property
    def passed(self) -> bool:
        return all(outcome.passed for outcome in self.assertions)

    def to_json_lines(self) -> str:
        lines = [event.to_line() for event in self.events]
        for outcome in self.assertions:
            lines.append(
                json.dumps(
                    {
                        "assertion": dict(outcome.assertion),
                        "passed": outcome.passed,
                        "detail": outcome.detail,
                    },
                    sort_keys=True,
                )
            )
        lines.append(json.dumps({"digest": self.digest}))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        checks = ", ".join(
            f"{o.assertion.get('type')}={'ok' if o.passed else 'FAIL'}" for o in self.assertions
        )
        return (
            f"{self.scenario} seed={self.seed}: {len(self.events)} events, "
            f"digest {self.digest[:12]} [{checks}]"
        )


class _SimActor:
    def __init__(self, spec: ActorSpec, handle: RepoHandle):
        self.spec = spec
        self.handle = handle
        self.crashed = False
        self.handler = build_handler(spec.handler) if spec.handler else None
        self.revision_index = 0
        self.desired = DesiredSet()

    def set_initial_desired(self, resources: Sequence[ExchangeResource]) -> None:
        mine = [
            r
            for r in resources
            if self.spec.namespaces is None or r.metadata.namespace in self.spec.namespaces
        ]
        self.desired = DesiredSet(
            tuple(DesiredResource(r, auto_archive=self.spec.auto_archive) for r in mine)
        )

    def advance_desired(self) -> None:
        if self.revision_index >= len(self.spec.revisions):
            raise ScenarioError(f"actor {self.spec.id} has no remaining desired revisions")
        revision = self.spec.revisions[self.revision_index]
        self.revision_index += 1
        self.desired = DesiredSet(
            tuple(DesiredResource(r, auto_archive=self.spec.auto_archive) for r in revision)
        )

    def reconcile(self, push: bool) -> ReconcileReport:
        from datetime import timedelta

        if self.spec.role is Role.PRODUCER:
            if self.spec.bindings:
                return pipeline_reconcile_once(self.handle, self.spec.bindings, push=push)
            return producer_reconcile_once(self.handle, self.desired, push=push)
        return consumer_reconcile_once(
            self.handle,
            self.handler,
            namespaces=self.spec.namespaces,
            kinds=self.spec.kinds,
            stale_after=timedelta(seconds=self.spec.stale_after_seconds),
            push=push,
        )

    def crash_mid_processing(self) -> ReconcileReport:
        """Write the Processing markers, push, then die before any outcome."""
        from datetime import timedelta

        handle = self.handle
        try:
            fetch(handle)
        except RemoteUnavailable as exc:
            return ReconcileReport(
                at=handle.clock.now(),
                actor=handle.identity.email,
                diagnostics=(f"remote unavailable: {exc}",),
            )
        state = read_all(handle)
        actions = []
        stale = timedelta(seconds=self.spec.stale_after_seconds)
        for path in sorted(state.resources):
            resource = state.resources[path]
            if (
                self.spec.namespaces is not None
                and resource.metadata.namespace not in self.spec.namespaces
            ):
                continue
            if self.spec.kinds is not None and resource.kind not in self.spec.kinds:
                continue
            if path in state.flagged_paths:
                continue
            now = handle.clock.now()
            if not _actionable(resource, now, stale):
                continue
            processing = ResourceStatus(
                phase=Phase.PROCESSING,
                result=resource.status.result if resource.status else {},
                observed_generation=resource.metadata.generation,
                updated_at=now,
            )
            commit_resource(handle, resource.with_status(processing), "status")
            push_with_retry(handle)
            actions.append(ReconcileAction(resource.ref, "status-updated", "phase=Processing"))
        return ReconcileReport(
            at=handle.clock.now(),
            actor=handle.identity.email,
            actions=tuple(actions),
            diagnostics=("crashed before writing outcomes",),
        )


def _report_digest(report: ReconcileReport | None) -> str:
    if report is None:
        return "-"
    payload = json.dumps(report.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def run_scenario(spec: ScenarioSpec, workdir: Path | str) -> SimTrace:
    """Execute a scenario deterministically and evaluate its assertions.

    Raises AssertionFailure (with the trace attached) when an assertion does
    not hold; the failing assertion is named.
    """
    workdir = Path(workdir)
    if workdir.exists() and any(workdir.iterdir()):
        raise ScenarioError(f"scenario workdir {workdir} is not empty")
    workdir.mkdir(parents=True, exist_ok=True)

    clock = LogicalClock()
    from .store import Identity

    admin = Identity("scenario-admin", _ADMIN_EMAIL, Role.PRODUCER)
    remote_path = workdir / "remote.git"
    init_repo(remote_path, bare=True, identity=admin, clock=clock)
    admin_handle = clone_repo(
        remote_path, workdir / "admin", admin, clock=clock, backoff=no_backoff()
    )
    _seed_configuration(admin_handle, spec, clock)

    actors: dict[str, _SimActor] = {}
    for actor_spec in spec.actors:
        handle = clone_repo(
            remote_path,
            workdir / "actors" / actor_spec.id,
            Identity(actor_spec.display_name, actor_spec.email, actor_spec.role),
            clock=clock,
            backoff=no_backoff(),
        )
        actor = _SimActor(actor_spec, handle)
        actor.set_initial_desired(spec.initial_resources)
        actors[actor_spec.id] = actor

    events: list[SimEvent] = []
    max_push_attempts = 0
    for index, step in enumerate(expand_schedule(spec)):
        actor = actors[step.actor]
        report: ReconcileReport | None = None
        action = step.action
        if actor.crashed and step.action not in ("revive",):
            action = f"{step.action}(skipped-crashed)"
        elif step.action in ("reconcile", "commit"):
            report = actor.reconcile(push=step.action == "reconcile")
        elif step.action == "push":
            try:
                attempts = push_with_retry(actor.handle).attempts
            except RemoteUnavailable as exc:
                report = ReconcileReport(
                    at=actor.handle.clock.now(),
                    actor=actor.handle.identity.email,
                    diagnostics=(f"remote unavailable: {exc}",),
                )
            else:
                report = ReconcileReport(
                    at=actor.handle.clock.now(),
                    actor=actor.handle.identity.email,
                    push_attempts=attempts,
                )
        elif step.action == "advance-desired":
            actor.advance_desired()
        elif step.action == "crash":
            if actor.spec.role is Role.CONSUMER:
                report = actor.crash_mid_processing()
            actor.crashed = True
        elif step.action == "revive":
            actor.crashed = False
        elif step.action == "go-offline":
            actor.handle.offline = True
        elif step.action == "go-online":
            actor.handle.offline = False
        if report is not None:
            max_push_attempts = max(max_push_attempts, report.push_attempts)
        tip = rev_parse(remote_path, spec_branch(spec)) or "-"
        events.append(SimEvent(index, step.actor, action, _report_digest(report), tip))

    observer = clone_repo(
        remote_path,
        workdir / "observer",
        Identity("observer", "observer@sim.invalid", Role.OBSERVER),
        clock=clock,
        backoff=no_backoff(),
    )
    outcomes = _evaluate_assertions(spec, actors, observer, max_push_attempts)
    digest = hashlib.sha256(
        "\n".join(event.to_line() for event in events).encode("utf-8")
    ).hexdigest()
    trace = SimTrace(
        scenario=spec.name,
        seed=spec.seed,
        events=tuple(events),
        assertions=tuple(outcomes),
        remote=remote_path,
        digest=digest,
    )
    failed = [o for o in outcomes if not o.passed]
    if failed:
        first = failed[0]
        raise AssertionFailure(
            f"assertion {first.assertion.get('type')} failed: {first.detail}",
            assertion=first.assertion,
            trace=trace,
        )
    return trace


def spec_branch(_spec: ScenarioSpec) -> str:
    return "main"


def _seed_configuration(admin_handle: RepoHandle, spec: ScenarioSpec, clock) -> None:
    """Register identities and kind schemas before any actor acts."""
    policy = TrustPolicy(
        identity_roles={actor.email: actor.role for actor in spec.actors},
        seed_status_allowed=spec.seed_status_allowed,
    )
    policy_path = admin_handle.root / POLICY_FILE
    policy_path.write_text(
        emit_document(
            policy_document(policy), ("identities", "unknownIdentity", "seedStatusAllowed")
        )
    )

    schemas = {definition.kind: definition for definition in spec.schemas}
    for resource in spec.initial_resources:
        schemas.setdefault(
            resource.kind,
            SchemaDefinition(resource.kind, resource.api_version, SchemaNode(type="object")),
        )
    for actor in spec.actors:
        for revision in actor.revisions:
            for resource in revision:
                schemas.setdefault(
                    resource.kind,
                    SchemaDefinition(
                        resource.kind, resource.api_version, SchemaNode(type="object")
                    ),
                )
        for binding in actor.bindings:
            schemas.setdefault(
                binding.target.kind,
                SchemaDefinition(
                    binding.target.kind, binding.target.api_version, SchemaNode(type="object")
                ),
            )
    for definition in schemas.values():
        target = admin_handle.root / schema_file_path(definition.kind)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(schema_to_document(definition))

    run_git(admin_handle.root, "add", "-A")
    env = identity_env(
        admin_handle.identity.display_name, admin_handle.identity.email, clock.now()
    )
    run_git(
        admin_handle.root,
        "commit",
        "-F",
        "-",
        env=env,
        input_bytes=b"config: register exchange contract",
    )
    run_git(admin_handle.root, "push", "origin", f"{admin_handle.branch}:{admin_handle.branch}")


def _evaluate_assertions(
    spec: ScenarioSpec,
    actors: Mapping[str, _SimActor],
    observer: RepoHandle,
    max_push_attempts: int,
) -> list[AssertionOutcome]:
    state = read_all(observer)
    outcomes = []
    for assertion in spec.assertions:
        a_type = assertion.get("type")
        if a_type == "converged":
            passed, detail = _check_converged(spec, actors, state)
        elif a_type == "phase-equals":
            passed, detail = _check_phase(observer, assertion)
        elif a_type == "audit-clean":
            findings = audit_repo(observer)
            passed = not findings
            detail = "; ".join(f"{f.code}@{f.commit_id[:8]}" for f in findings) or "no findings"
        elif a_type == "replay-clean":
            result = replay_history(observer)
            passed = result.clean
            detail = (
                "all paths match"
                if passed
                else "; ".join(f"{p}: {r}" for p, r in result.mismatches.items())
            )
        elif a_type == "max-push-attempts":
            limit = int(assertion.get("limit", 1))
            passed = max_push_attempts <= limit
            detail = f"max observed {max_push_attempts}, limit {limit}"
        else:  # pragma: no cover - rejected at parse time
            passed, detail = False, f"unknown assertion {a_type!r}"
        outcomes.append(AssertionOutcome(assertion, passed, detail))
    return outcomes


def _check_converged(
    spec: ScenarioSpec, actors: Mapping[str, _SimActor], state
) -> tuple[bool, str]:
    problems = []
    consumers = [a.spec for a in actors.values() if a.spec.role is Role.CONSUMER]
    for path in sorted(state.resources):
        resource = state.resources[path]
        status = resource.status
        if status is None or status.phase is not Phase.COMPLETED:
            problems.append(f"{resource.ref}: phase is {status.phase.value if status else 'absent'}")
            continue
        if status.observed_generation != resource.metadata.generation:
            problems.append(
                f"{resource.ref}: observedGeneration {status.observed_generation} "
                f"!= generation {resource.metadata.generation}"
            )
            continue
        covering = [
            c
            for c in consumers
            if (c.namespaces is None or resource.metadata.namespace in c.namespaces)
            and (c.kinds is None or resource.kind in c.kinds)
        ]
        if len(covering) == 1 and covering[0].handler:
            expected = expected_result(covering[0].handler, resource.spec)
            if expected is not None and dict(status.result) != expected:
                problems.append(f"{resource.ref}: result differs from handler fixed point")
    if problems:
        return False, "; ".join(problems)
    return True, f"{len(state.resources)} live resources converged"


def _check_phase(observer: RepoHandle, assertion: Mapping[str, Any]) -> tuple[bool, str]:
    ref = assertion.get("resource")
    want = assertion.get("phase")
    if not ref or not want:
        return False, "phase-equals needs resource and phase arguments"
    from .store import read_resource

    resource = read_resource(observer, ref)
    if resource is None:
        resource = latest_archive(observer, ref)
    if resource is None:
        return False, f"{ref} not found live or archived"
    got = resource.status.phase.value if resource.status else "absent"
    return got == want, f"{ref} phase is {got}, want {want}"
