"""Structural schemas: the contract a producer and consumer agree on.

A deliberately small, closed subset of JSON-Schema-style validation: no $ref,
no composition keywords. Validation never raises on any value tree input;
violations are returned as data.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .canonical import emit_document, load_document
from .errors import DuplicateKind, ParseError, SchemaParseError
from .resource import ExchangeResource

SCHEMA_DIR = ".giter/schemas"
SCHEMA_TYPES = ("object", "array", "string", "integer", "number", "boolean", "any")

_NODE_KEYS = (
    "type",
    "properties",
    "required",
    "additionalProperties",
    "items",
    "enum",
    "pattern",
    "minimum",
    "maximum",
)


@dataclass(frozen=True)
class SchemaNode:
    type: str = "any"
    properties: Mapping[str, "SchemaNode"] | None = None
    required: tuple[str, ...] = ()
    additional_properties: bool | None = None
    items: "SchemaNode | None" = None
    enum: tuple[str, ...] | None = None
    pattern: str | None = None
    minimum: float | None = None
    maximum: float | None = None

    def __post_init__(self):
        if self.type not in SCHEMA_TYPES:
            raise SchemaParseError(f"unknown schema type {self.type!r}")
        if self.required and set(self.required) - set(self.properties or {}):
            raise SchemaParseError("required names must be declared in properties")
        if self.enum is not None and not self.enum:
            raise SchemaParseError("enum lists must be non-empty")
        if self.pattern is not None:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise SchemaParseError(f"invalid pattern {self.pattern!r}: {exc}") from exc
        if self.minimum is not None and self.maximum is not None:
            if self.minimum > self.maximum:
                raise SchemaParseError("minimum must not exceed maximum")

    @property
    def allows_unknown_fields(self) -> bool:
        # A bare object (no declared properties) is freeform; declaring
        # properties closes the field set unless explicitly opened.
        if self.additional_properties is not None:
            return self.additional_properties
        return self.properties is None


@dataclass(frozen=True)
class SchemaDefinition:
    kind: str
    api_version: str
    spec_schema: SchemaNode
    status_result_schema: SchemaNode | None = None

    def __post_init__(self):
        if self.spec_schema.type != "object":
            raise SchemaParseError("the spec schema root must be an object schema")

    @property
    def filename(self) -> str:
        return f"{self.kind.lower()}.schema.yaml"


@dataclass(frozen=True)
class Violation:
    path: str
    code: str
    detail: str = ""

    def render(self) -> str:
        where = self.path or "<root>"
        return f"{where}: {self.code}" + (f" ({self.detail})" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def prefixed(self, prefix: str) -> "ValidationReport":
        joined = tuple(
            Violation(f"{prefix}.{v.path}" if v.path else prefix, v.code, v.detail)
            for v in self.violations
        )
        return ValidationReport(joined)


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _type_name(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, dict):
        return "object"
    if isinstance(value, list):
        return "array"
    return type(value).__name__


def validate(tree: Any, node: SchemaNode, path: str = "") -> ValidationReport:
    """Check a value tree against a schema node. Pure and total."""
    out: list[Violation] = []
    _validate(tree, node, path, out)
    return ValidationReport(tuple(out))


def _mismatch(path: str, expected: str, value: Any) -> Violation:
    return Violation(path, "type-mismatch", f"expected {expected}, got {_type_name(value)}")


def _validate(value: Any, node: SchemaNode, path: str, out: list[Violation]) -> None:
    kind = node.type
    if kind == "any":
        return
    if kind == "object":
        if not isinstance(value, dict):
            out.append(_mismatch(path, "object", value))
            return
        properties = node.properties or {}
        for name in node.required:
            if name not in value:
                out.append(Violation(_join(path, name), "missing-required"))
        if not node.allows_unknown_fields:
            for name in sorted(set(value) - set(properties)):
                out.append(Violation(_join(path, name), "unknown-field"))
        for name, child_schema in properties.items():
            if name in value:
                _validate(value[name], child_schema, _join(path, name), out)
        return
    if kind == "array":
        if not isinstance(value, list):
            out.append(_mismatch(path, "array", value))
            return
        if node.items is not None:
            for index, item in enumerate(value):
                _validate(item, node.items, f"{path}[{index}]", out)
        return
    if kind == "string":
        if not isinstance(value, str):
            out.append(_mismatch(path, "string", value))
            return
        if node.enum is not None and value not in node.enum:
            out.append(Violation(path, "enum-violation", f"{value!r} not in {list(node.enum)}"))
        if node.pattern is not None and not re.search(node.pattern, value):
            out.append(Violation(path, "pattern-violation", f"{value!r} !~ /{node.pattern}/"))
        return
    if kind == "boolean":
        if not isinstance(value, bool):
            out.append(_mismatch(path, "boolean", value))
        return
    if kind == "integer":
        if isinstance(value, bool) or not isinstance(value, int):
            out.append(_mismatch(path, "integer", value))
            return
    elif kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            out.append(_mismatch(path, "number", value))
            return
    if node.minimum is not None and value < node.minimum:
        out.append(Violation(path, "bound-violation", f"{value} < minimum {node.minimum}"))
    if node.maximum is not None and value > node.maximum:
        out.append(Violation(path, "bound-violation", f"{value} > maximum {node.maximum}"))


# ---------------------------------------------------------------------------
# Schema documents
# ---------------------------------------------------------------------------


def parse_schema_node(tree: Any, where: str = "schema") -> SchemaNode:
    if not isinstance(tree, dict):
        raise SchemaParseError(f"{where}: schema node must be a map")
    unknown = sorted(set(tree) - set(_NODE_KEYS))
    if unknown:
        raise SchemaParseError(f"{where}: unknown schema keys {unknown}")
    properties = None
    if tree.get("properties") is not None:
        raw = tree["properties"]
        if not isinstance(raw, dict):
            raise SchemaParseError(f"{where}.properties must be a map")
        properties = {
            name: parse_schema_node(child, f"{where}.properties.{name}")
            for name, child in raw.items()
        }
    items = None
    if tree.get("items") is not None:
        items = parse_schema_node(tree["items"], f"{where}.items")
    required = tree.get("required") or []
    if not isinstance(required, list) or not all(isinstance(r, str) for r in required):
        raise SchemaParseError(f"{where}.required must be a list of strings")
    enum = tree.get("enum")
    if enum is not None:
        if not isinstance(enum, list) or not all(isinstance(e, str) for e in enum):
            raise SchemaParseError(f"{where}.enum must be a list of strings")
        enum = tuple(enum)
    try:
        return SchemaNode(
            type=tree.get("type", "any"),
            properties=properties,
            required=tuple(required),
            additional_properties=tree.get("additionalProperties"),
            items=items,
            enum=enum,
            pattern=tree.get("pattern"),
            minimum=tree.get("minimum"),
            maximum=tree.get("maximum"),
        )
    except SchemaParseError as exc:
        raise SchemaParseError(f"{where}: {exc}") from exc


def parse_schema_definition(document: bytes | str, where: str = "schema") -> SchemaDefinition:
    try:
        tree = load_document(document)
    except ParseError as exc:
        raise SchemaParseError(f"{where}: {exc}") from exc
    return schema_definition_from_tree(tree, where)


def schema_definition_from_tree(tree: Any, where: str = "schema") -> SchemaDefinition:
    if not isinstance(tree, dict):
        raise SchemaParseError(f"{where}: schema document root must be a map")
    unknown = sorted(set(tree) - {"kind", "apiVersion", "spec", "statusResult"})
    if unknown:
        raise SchemaParseError(f"{where}: unknown schema document keys {unknown}")
    for key in ("kind", "apiVersion", "spec"):
        if key not in tree:
            raise SchemaParseError(f"{where}: {key} is required")
    status_result = None
    if tree.get("statusResult") is not None:
        status_result = parse_schema_node(tree["statusResult"], f"{where}.statusResult")
    return SchemaDefinition(
        kind=tree["kind"],
        api_version=tree["apiVersion"],
        spec_schema=parse_schema_node(tree["spec"], f"{where}.spec"),
        status_result_schema=status_result,
    )


def schema_to_document(definition: SchemaDefinition) -> str:
    """Canonical text for a schema definition (used for repo seeding)."""

    def node_tree(node: SchemaNode) -> dict:
        tree: dict[str, Any] = {"type": node.type}
        if node.properties is not None:
            tree["properties"] = {k: node_tree(v) for k, v in node.properties.items()}
        if node.required:
            tree["required"] = list(node.required)
        if node.additional_properties is not None:
            tree["additionalProperties"] = node.additional_properties
        if node.items is not None:
            tree["items"] = node_tree(node.items)
        if node.enum is not None:
            tree["enum"] = list(node.enum)
        if node.pattern is not None:
            tree["pattern"] = node.pattern
        if node.minimum is not None:
            tree["minimum"] = node.minimum
        if node.maximum is not None:
            tree["maximum"] = node.maximum
        return tree

    doc: dict[str, Any] = {
        "kind": definition.kind,
        "apiVersion": definition.api_version,
        "spec": node_tree(definition.spec_schema),
    }
    if definition.status_result_schema is not None:
        doc["statusResult"] = node_tree(definition.status_result_schema)
    return emit_document(doc, ("kind", "apiVersion", "spec", "statusResult"))


def load_schemas(files: Mapping[str, bytes | str]) -> dict[str, SchemaDefinition]:
    """Build the kind registry from `.giter/schemas/*.schema.yaml` contents.

    Keys are file paths (used in error messages); duplicate kinds are
    rejected.
    """
    registry: dict[str, SchemaDefinition] = {}
    for path in sorted(files):
        definition = parse_schema_definition(files[path], where=path)
        if definition.kind in registry:
            raise DuplicateKind(f"kind {definition.kind!r} declared more than once ({path})")
        registry[definition.kind] = definition
    return registry


def validate_resource(
    resource: ExchangeResource, registry: Mapping[str, SchemaDefinition]
) -> ValidationReport:
    """Validate spec (and status.result when schema'd) against the registry."""
    definition = registry.get(resource.kind)
    if definition is None or definition.api_version != resource.api_version:
        return ValidationReport(
            (
                Violation(
                    "",
                    "unknown-kind",
                    f"no schema registered for {resource.kind} {resource.api_version}",
                ),
            )
        )
    violations = list(validate(resource.spec, definition.spec_schema).prefixed("spec").violations)
    if resource.status is not None and definition.status_result_schema is not None:
        report = validate(resource.status.result, definition.status_result_schema)
        violations.extend(report.prefixed("status.result").violations)
    return ValidationReport(tuple(violations))
