"""Multi-stage chaining: completed sources project status fields into
target specs, so one exchange feeds the next.

A binding fires when its source reaches Completed with the status caught up
to the current generation, and at most once per source generation: the write
stamps the target with source annotations and a repeated evaluation sees the
stamp and stays quiet. Failed sources simply never fire.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from .canonical import load_document
from .errors import (
    CycleError,
    GiterError,
    MappingError,
    MergeConflict,
    PushExhausted,
    RemoteUnavailable,
)
from .ownership import Role
from .resource import (
    ABSENT,
    ExchangeResource,
    Phase,
    ResourceMetadata,
    ResourceStatus,
    get_path,
    set_path,
    to_document_tree,
    validate_identifier,
)
from .schema import SchemaDefinition, validate_resource
from .store import (
    RepoHandle,
    commit_resource,
    fetch,
    load_ownership_policy,
    load_registry,
    push_with_retry,
    read_all,
)
from .reconcile import ReconcileAction, ReconcileReport

PIPELINES_FILE = ".giter/pipelines.yaml"
SOURCE_ANNOTATION = "giter.io/source"
SOURCE_GENERATION_ANNOTATION = "giter.io/source-generation"


@dataclass(frozen=True)
class SourceSelector:
    namespace: str
    kind: str
    name: str | None = None
    match_labels: Mapping[str, str] | None = None

    def matches(self, resource: ExchangeResource) -> bool:
        if resource.metadata.namespace != self.namespace or resource.kind != self.kind:
            return False
        if self.name is not None and resource.metadata.name != self.name:
            return False
        if self.match_labels:
            labels = resource.metadata.labels
            return all(labels.get(k) == v for k, v in self.match_labels.items())
        return True


@dataclass(frozen=True)
class TargetTemplate:
    namespace: str
    kind: str
    api_version: str
    name_template: str

    def name_for(self, source: ExchangeResource) -> str:
        name = self.name_template.replace("{source.name}", source.metadata.name)
        return validate_identifier(name, "target name")


@dataclass(frozen=True)
class FieldMapping:
    from_path: str  # within the source document (e.g. status.result.outputUrl)
    to_path: str  # within the target spec


@dataclass(frozen=True)
class PipelineBinding:
    source: SourceSelector
    target: TargetTemplate
    mappings: tuple[FieldMapping, ...]

    def __post_init__(self):
        if not self.mappings:
            raise MappingError("a binding needs at least one field mapping")
        if (
            self.source.kind == self.target.kind
            and self.source.namespace == self.target.namespace
        ):
            raise CycleError(
                f"binding targets its own source kind {self.source.kind} "
                f"in namespace {self.source.namespace}"
            )


def check_acyclic(bindings: Sequence[PipelineBinding]) -> None:
    """The binding graph over kinds must be a DAG."""
    edges: dict[str, set[str]] = {}
    for binding in bindings:
        edges.setdefault(binding.source.kind, set()).add(binding.target.kind)
    visiting: set[str] = set()
    done: set[str] = set()

    def walk(node: str, trail: tuple[str, ...]) -> None:
        if node in done:
            return
        if node in visiting:
            raise CycleError(f"binding cycle over kinds: {' -> '.join(trail + (node,))}")
        visiting.add(node)
        for target in sorted(edges.get(node, ())):
            walk(target, trail + (node,))
        visiting.discard(node)
        done.add(node)

    for start in sorted(edges):
        walk(start, ())


def parse_bindings(
    document: bytes | str | list,
    registry: Mapping[str, SchemaDefinition] | None = None,
) -> tuple[PipelineBinding, ...]:
    """Load bindings from the `.giter/pipelines.yaml` document form.

    Document shape: {bindings: [{source: {...}, target: {...}, mappings: [...]}]}
    (a bare list is accepted as the bindings list).
    """
    tree = load_document(document) if isinstance(document, (str, bytes)) else document
    if isinstance(tree, dict):
        tree = tree.get("bindings", [])
    if not isinstance(tree, list):
        raise MappingError("pipelines document must hold a bindings list")
    bindings = []
    for index, entry in enumerate(tree):
        where = f"bindings[{index}]"
        if not isinstance(entry, dict):
            raise MappingError(f"{where}: binding must be a map")
        source_raw = entry.get("source")
        target_raw = entry.get("target")
        mappings_raw = entry.get("mappings")
        if not isinstance(source_raw, dict) or not isinstance(target_raw, dict):
            raise MappingError(f"{where}: source and target maps are required")
        if not isinstance(mappings_raw, list):
            raise MappingError(f"{where}: mappings list is required")
        source = SourceSelector(
            namespace=source_raw.get("namespace", "default"),
            kind=source_raw["kind"],
            name=source_raw.get("name"),
            match_labels=source_raw.get("matchLabels"),
        )
        target = TargetTemplate(
            namespace=target_raw.get("namespace", "default"),
            kind=target_raw["kind"],
            api_version=target_raw["apiVersion"],
            name_template=target_raw.get("name", "{source.name}"),
        )
        mappings = tuple(
            FieldMapping(from_path=m["from"], to_path=m["to"]) for m in mappings_raw
        )
        bindings.append(PipelineBinding(source=source, target=target, mappings=mappings))
    check_acyclic(bindings)
    if registry is not None:
        for binding in bindings:
            if binding.target.kind not in registry:
                raise MappingError(
                    f"target kind {binding.target.kind} has no registered schema"
                )
    return tuple(bindings)


def _fired(source: ExchangeResource) -> bool:
    status = source.status
    return (
        status is not None
        and status.phase is Phase.COMPLETED
        and status.observed_generation == source.metadata.generation
    )


@dataclass(frozen=True)
class PipelineWrite:
    resource: ExchangeResource
    verb: str  # create | update
    source_ref: str


def evaluate_bindings(
    repo_state: Mapping[str, ExchangeResource],
    bindings: Sequence[PipelineBinding],
    registry: Mapping[str, SchemaDefinition] | None = None,
    *,
    seed_status: bool = True,
) -> tuple[list[PipelineWrite], list[str]]:
    """Compute the target writes implied by completed sources.

    Returns (writes, diagnostics). Fire-once per source generation: a target
    already stamped with the source's generation produces no write. A dangling
    `from` path skips that source with a diagnostic; a `to` write that breaks
    the target schema raises MappingError.
    """
    by_ref = {r.ref: r for r in repo_state.values()}
    writes: list[PipelineWrite] = []
    diagnostics: list[str] = []
    for binding in bindings:
        sources = [
            repo_state[p] for p in sorted(repo_state) if binding.source.matches(repo_state[p])
        ]
        for source in sources:
            if not _fired(source):
                continue
            target_name = binding.target.name_for(source)
            target_ref = f"{binding.target.namespace}/{binding.target.kind.lower()}/{target_name}"
            existing = by_ref.get(target_ref)
            source_gen = str(source.metadata.generation)
            if existing is not None:
                stamped_ref = existing.metadata.annotations.get(SOURCE_ANNOTATION)
                stamped_gen = existing.metadata.annotations.get(SOURCE_GENERATION_ANNOTATION)
                if stamped_ref == source.ref and stamped_gen == source_gen:
                    continue

            source_tree = to_document_tree(source)
            new_spec: Any = dict(existing.spec) if existing is not None else {}
            dangling = None
            for mapping in binding.mappings:
                value = get_path(source_tree, mapping.from_path)
                if value is ABSENT:
                    dangling = mapping.from_path
                    break
                new_spec = set_path(new_spec, mapping.to_path, value)
            if dangling is not None:
                diagnostics.append(
                    f"{source.ref}: source path {dangling!r} is absent; binding skipped"
                )
                continue

            annotations = dict(existing.metadata.annotations) if existing else {}
            annotations[SOURCE_ANNOTATION] = source.ref
            annotations[SOURCE_GENERATION_ANNOTATION] = source_gen

            if existing is None:
                metadata = ResourceMetadata(
                    name=target_name,
                    namespace=binding.target.namespace,
                    generation=1,
                    annotations=annotations,
                )
                status = ResourceStatus(phase=Phase.PENDING, result={}) if seed_status else None
                resource = ExchangeResource(
                    api_version=binding.target.api_version,
                    kind=binding.target.kind,
                    metadata=metadata,
                    spec=new_spec,
                    status=status,
                )
                verb = "create"
            else:
                generation = existing.metadata.generation
                if new_spec != existing.spec:
                    generation += 1
                metadata = replace(
                    existing.metadata, generation=generation, annotations=annotations
                )
                resource = replace(existing, metadata=metadata, spec=new_spec)
                verb = "update"

            if registry is not None:
                report = validate_resource(resource, registry)
                if not report.ok:
                    raise MappingError(
                        f"mapped write for {target_ref} violates the target schema: "
                        + "; ".join(v.render() for v in report.violations)
                    )
            writes.append(PipelineWrite(resource=resource, verb=verb, source_ref=source.ref))
    return writes, diagnostics


def pipeline_reconcile_once(
    handle: RepoHandle,
    bindings: Sequence[PipelineBinding],
    *,
    push: bool = True,
) -> ReconcileReport:
    """Run one pipeline pass: fetch, evaluate bindings, commit target writes."""
    if handle.identity.role is not Role.PRODUCER:
        raise GiterError("pipelines write specs and need a producer handle")
    try:
        fetch(handle)
    except RemoteUnavailable as exc:
        return ReconcileReport(
            at=handle.clock.now(),
            actor=handle.identity.email,
            diagnostics=(f"remote unavailable: {exc}",),
        )
    registry = load_registry(handle)
    state = read_all(handle, registry)
    seed = load_ownership_policy(handle).seed_status_allowed
    writes, diagnostics = evaluate_bindings(
        state.resources, bindings, registry, seed_status=seed
    )
    actions = []
    wrote = False
    for write in writes:
        try:
            stamped = _stamp_created(handle, write.resource) if write.verb == "create" else write.resource
            commit_resource(handle, stamped, write.verb)
            actions.append(
                ReconcileAction(
                    write.resource.ref,
                    "created" if write.verb == "create" else "spec-updated",
                    f"from {write.source_ref}",
                )
            )
            wrote = True
        except (PushExhausted, MergeConflict):
            raise
        except GiterError as exc:
            diagnostics.append(f"{write.resource.ref}: {exc}")
    attempts = 0
    if push and wrote:
        attempts = push_with_retry(handle).attempts
    return ReconcileReport(
        at=handle.clock.now(),
        actor=handle.identity.email,
        actions=tuple(actions),
        push_attempts=attempts,
        diagnostics=tuple(diagnostics),
    )


def _stamp_created(handle: RepoHandle, resource: ExchangeResource) -> ExchangeResource:
    metadata = replace(resource.metadata, created_at=handle.clock.now())
    return replace(resource, metadata=metadata)
