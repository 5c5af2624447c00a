"""Canonical text form for exchange documents.

One deterministic rendering per value tree: nested map keys sorted, two-space
indentation, UTF-8, trailing newline. Equal trees always produce equal bytes,
which keeps version-control diffs minimal and lets merge classification work
on content rather than formatting.

Strings are emitted plain only when re-reading them yields the same string;
anything the YAML resolver would reinterpret (booleans, numbers, timestamps)
is double-quoted with JSON escaping, which is valid YAML.
"""

from __future__ import annotations

import json
import math
import re
from typing import Any, Sequence

import yaml

from .errors import ParseError, SerializationError

_INDENT = "  "
# Conservative charset for plain scalars: no indicators, no whitespace, no
# comment or mapping separators anywhere in the token.
_PLAIN_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._/@+-]*$")


def _plain_safe(text: str) -> bool:
    if not _PLAIN_RE.match(text):
        return False
    try:
        return yaml.safe_load(text) == text
    except yaml.YAMLError:
        return False


def _quote(text: str) -> str:
    # json.dumps output is a valid YAML double-quoted scalar.
    return json.dumps(text)


def _float_token(value: float) -> str:
    if not math.isfinite(value):
        raise SerializationError(f"non-finite float {value!r} cannot be serialized")
    text = repr(value)
    if "e" in text:
        # YAML float resolution needs a dot in the mantissa.
        mantissa, _, exponent = text.partition("e")
        if "." not in mantissa:
            mantissa += ".0"
        text = f"{mantissa}e{exponent}"
    return text


def _scalar_token(value: Any) -> str | None:
    """Inline token for scalars and empty containers, None for block values."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _float_token(value)
    if isinstance(value, str):
        return value if _plain_safe(value) else _quote(value)
    if isinstance(value, dict):
        return "{}" if not value else None
    if isinstance(value, (list, tuple)):
        return "[]" if not value else None
    raise SerializationError(f"unsupported value type: {type(value).__name__}")


def _key_token(key: Any) -> str:
    if not isinstance(key, str):
        raise SerializationError(f"map keys must be strings, got {type(key).__name__}")
    return key if _plain_safe(key) else _quote(key)


def _emit_mapping(value: dict, depth: int, keys: Sequence[str]) -> list[str]:
    pad = _INDENT * depth
    lines: list[str] = []
    for key in keys:
        child = value[key]
        token = _scalar_token(child)
        if token is not None:
            lines.append(f"{pad}{_key_token(key)}: {token}")
        else:
            lines.append(f"{pad}{_key_token(key)}:")
            lines.extend(_emit_block(child, depth + 1))
    return lines


def _emit_block(value: Any, depth: int) -> list[str]:
    pad = _INDENT * depth
    if isinstance(value, dict):
        return _emit_mapping(value, depth, sorted(value, key=_key_token))
    if isinstance(value, (list, tuple)):
        lines: list[str] = []
        for item in value:
            token = _scalar_token(item)
            if token is not None:
                lines.append(f"{pad}- {token}")
            else:
                child_lines = _emit_block(item, depth + 1)
                lines.append(f"{pad}- {child_lines[0][len(pad) + 2:]}")
                lines.extend(child_lines[1:])
        return lines
    raise SerializationError(f"cannot emit {type(value).__name__} as a block value")


def emit_document(tree: Any, top_order: Sequence[str] | None = None) -> str:
    """Render a value tree in the canonical document form.

    ``top_order`` fixes the ordering of the root map's keys (keys not listed
    follow, sorted); every nested map is sorted lexicographically.
    """
    token = _scalar_token(tree)
    if token is not None:
        return token + "\n"
    if isinstance(tree, dict) and top_order:
        keys = [k for k in top_order if k in tree]
        keys += sorted((k for k in tree if k not in set(top_order)), key=_key_token)
        return "\n".join(_emit_mapping(tree, 0, keys)) + "\n"
    return "\n".join(_emit_block(tree, 0)) + "\n"


def load_document(document: bytes | str) -> Any:
    """Parse a canonical (or any YAML) document into plain Python values."""
    if isinstance(document, bytes):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not valid UTF-8: {exc}") from exc
    try:
        return yaml.safe_load(document)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed document: {exc}") from exc
