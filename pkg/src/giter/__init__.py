"""giter: asynchronous declarative exchange of custom resources over Git.

A producer declares desired state in a resource's ``spec``; a consumer does
the work and reports back in ``status``; both reconcile against a shared Git
repository that doubles as the audit trail.
"""

from .clock import Clock, LogicalClock
from .errors import (
    AlreadyInitialized,
    AssertionFailure,
    CycleError,
    DuplicateKind,
    GiterError,
    HandlerSpawnError,
    HandlerTimeout,
    IdentifierError,
    IllegalTransition,
    MappingError,
    MergeConflict,
    NotTerminal,
    NothingToCommit,
    OwnershipViolation,
    ParseError,
    PathError,
    PolicyError,
    PushExhausted,
    RemoteUnavailable,
    ScenarioError,
    SchemaParseError,
    SerializationError,
    StructureError,
    ValidationFailed,
)
from .ownership import (
    ChangeClass,
    ChangeKind,
    OwnershipPolicy,
    Role,
    Verdict,
    check_permitted,
    classify,
    merge_resources,
)
from .pipeline import (
    FieldMapping,
    PipelineBinding,
    SourceSelector,
    TargetTemplate,
    evaluate_bindings,
    parse_bindings,
    pipeline_reconcile_once,
)
from .policy import (
    AuditFinding,
    ReplayResult,
    TrustPolicy,
    audit_repo,
    parse_policy,
    replay_history,
    verify_commit,
)
from .reconcile import (
    DesiredResource,
    DesiredSet,
    ExternalHandler,
    HandlerOutcome,
    HandlerRequest,
    LoopConfig,
    ReconcileReport,
    consumer_reconcile_once,
    invoke_external_handler,
    producer_reconcile_once,
    run_loop,
)
from .resource import (
    ABSENT,
    ExchangeResource,
    Phase,
    ResourceMetadata,
    ResourceStatus,
    canonical_serialize,
    get_path,
    parse_resource,
    set_path,
    transition_phase,
)
from .schema import (
    SchemaDefinition,
    SchemaNode,
    ValidationReport,
    Violation,
    load_schemas,
    validate,
    validate_resource,
)
from .sim import ScenarioSpec, SimTrace, expand_schedule, run_scenario
from .store import (
    Backoff,
    CommitRecord,
    Identity,
    PushReport,
    ReadResult,
    RepoHandle,
    SyncReport,
    archive_resource,
    clone_repo,
    commit_resource,
    fetch,
    history,
    init_repo,
    no_backoff,
    open_repo,
    push_with_retry,
    read_all,
    resource_path,
)

__version__ = "0.1.0"
