"""Exception types shared across the giter package."""

from __future__ import annotations


class GiterError(Exception):
    """Base class for every error raised by this package."""


class SerializationError(GiterError):
    """A value cannot be rendered in the canonical document form."""


class ParseError(GiterError):
    """A document is not syntactically valid."""


class StructureError(GiterError):
    """A document parsed but does not have the required shape."""


class PathError(GiterError):
    """A value path is malformed or addresses through a scalar."""


class IllegalTransition(GiterError):
    """A phase transition outside the lifecycle relation was requested."""


class IdentifierError(GiterError):
    """A name, namespace or kind does not satisfy the identifier rules."""


class SchemaParseError(GiterError):
    """A schema document is malformed."""


class DuplicateKind(GiterError):
    """Two schema files declare the same resource kind."""


class PolicyError(GiterError):
    """The trust policy document is malformed."""


class AlreadyInitialized(GiterError):
    """Repository initialization target is not empty."""


class GitError(GiterError):
    """A git invocation failed unexpectedly."""

    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message)
        self.stderr = stderr


class RemoteUnavailable(GiterError):
    """The shared remote cannot be reached; callers skip the cycle."""


class PushExhausted(GiterError):
    """All push attempts were spent without landing the local commits."""


class NothingToCommit(GiterError):
    """A commit was requested but the document is unchanged."""


class NotTerminal(GiterError):
    """Archival requested for a resource that is not Completed or Failed."""


class OwnershipViolation(GiterError):
    """A write crosses the section ownership contract."""

    def __init__(self, message: str, reasons: tuple[str, ...] = ()):
        super().__init__(message)
        self.reasons = reasons


class ValidationFailed(GiterError):
    """A document does not conform to its registered schema."""

    def __init__(self, message: str, violations=()):
        super().__init__(message)
        self.violations = tuple(violations)


class MergeConflict(GiterError):
    """Both sides changed the same owned section; never auto-resolved."""

    def __init__(self, message: str, section: str | None = None, path: str | None = None):
        super().__init__(message)
        self.section = section
        self.path = path


class HandlerTimeout(GiterError):
    """An external handler exceeded its wall-clock budget."""


class HandlerSpawnError(GiterError):
    """An external handler process could not be started."""


class CycleError(GiterError):
    """Pipeline bindings form a cycle over resource kinds."""


class MappingError(GiterError):
    """A pipeline mapping is invalid or produces a schema-violating write."""


class ScenarioError(GiterError):
    """A simulation scenario document is invalid."""


class AssertionFailure(GiterError):
    """A scenario assertion did not hold; carries the trace for inspection."""

    def __init__(self, message: str, assertion=None, trace=None):
        super().__init__(message)
        self.assertion = assertion
        self.trace = trace
