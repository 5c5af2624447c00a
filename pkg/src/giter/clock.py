"""Clock abstraction so timestamps (and therefore commit ids) can be pinned."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone


class Clock:
    """Wall clock. Returns timezone-aware UTC datetimes."""

    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class LogicalClock(Clock):
    """Deterministic clock that advances a fixed step on every reading.

    The simulation harness shares one instance across all actors so every
    timestamp, and every commit id derived from one, is a pure function of
    the event order.
    """

    def __init__(self, start: datetime | None = None, step_seconds: float = 1.0):
        self._current = start or datetime(2021, 1, 1, tzinfo=timezone.utc)
        self._step = timedelta(seconds=step_seconds)

    def now(self) -> datetime:
        current = self._current
        self._current = current + self._step
        return current


def ensure_utc(value: datetime) -> datetime:
    """Normalize a datetime to aware UTC; naive values are taken as UTC."""
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


def format_timestamp(value: datetime) -> str:
    """RFC-3339 UTC with fixed microsecond width, e.g. 2021-01-01T00:00:00.000000Z."""
    value = ensure_utc(value)
    return value.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def format_compact_timestamp(value: datetime) -> str:
    """Filename-safe UTC stamp that sorts lexicographically by time."""
    value = ensure_utc(value)
    return value.strftime("%Y%m%dT%H%M%S.%fZ")


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC-3339 timestamp; 'Z' and explicit offsets are accepted."""
    candidate = text.strip()
    if candidate.endswith("Z"):
        candidate = candidate[:-1] + "+00:00"
    return ensure_utc(datetime.fromisoformat(candidate))
