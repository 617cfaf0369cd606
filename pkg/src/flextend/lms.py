"""Connector interface to the assignment platform, plus test connectors.

A connector is the narrow seam a real Gradescope or Canvas client must
fill: list assignments, read one extension, upsert one extension.
Upserts are keyed (student email, assignment slug) and keep the later
due date unless allow_shorten says otherwise, so retried and duplicate
applies are harmless.  ``apply_extension`` drives a connector from an
approved request and records the outcome in the event log;
``reconcile`` is the read-only drift check between log and platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Protocol, runtime_checkable

from .model import (
    APPROVED_REQUEST_STATES,
    ExtensionRequest,
    RequestAction,
    RequestStatus,
    transition_request,
)
from .policy import compute_new_due_date
from .store import EventKind, EventLog, Snapshot

# Retry schedule shared with the email outbox: 30 s, 2 min, 8 min, ...
RETRY_BASE_SECONDS = 30
RETRY_FACTOR = 4
DEFAULT_MAX_ATTEMPTS = 5


class ConnectorUnavailable(Exception):
    """Transport-level failure; the apply may be retried."""


class RejectedByLms(Exception):
    """The platform refused the extension; retrying will not help."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


@dataclass(frozen=True)
class LmsExtension:
    student_email: str
    assignment_slug: str
    new_due_at: datetime
    source_request_id: str


@runtime_checkable
class Connector(Protocol):
    def list_assignments(self) -> list[str]: ...

    def get_extension(self, student_email: str, assignment_slug: str) -> Optional[datetime]: ...

    def upsert_extension(self, extension: LmsExtension, allow_shorten: bool = False) -> bool:
        """Create or update; returns True when platform state changed."""
        ...

    def list_extensions(self) -> dict[tuple[str, str], datetime]: ...


def resolve_upsert(
    existing: Optional[datetime], new: datetime, allow_shorten: bool
) -> datetime:
    """Upsert rule shared by connectors: later date wins, shortening is
    opt-in."""
    if existing is None or new > existing or allow_shorten:
        return new
    return existing


class MockConnector:
    """In-memory connector with optional injected faults."""

    def __init__(self, assignments: Optional[list[str]] = None, rng=None, failure_rate: float = 0.0):
        self.assignments = list(assignments or [])
        self.state: dict[tuple[str, str], datetime] = {}
        self.history: list[tuple] = []
        self.rng = rng
        self.failure_rate = failure_rate
        self.reject_slugs: set[str] = set()

    def _maybe_fail(self, op: str) -> None:
        if self.rng is not None and self.rng.random() < self.failure_rate:
            self.history.append((op, "unavailable"))
            raise ConnectorUnavailable(f"injected outage during {op}")

    def list_assignments(self) -> list[str]:
        self._maybe_fail("list_assignments")
        return list(self.assignments)

    def get_extension(self, student_email: str, assignment_slug: str) -> Optional[datetime]:
        self._maybe_fail("get_extension")
        return self.state.get((student_email, assignment_slug))

    def upsert_extension(self, extension: LmsExtension, allow_shorten: bool = False) -> bool:
        self._maybe_fail("upsert_extension")
        if extension.assignment_slug in self.reject_slugs:
            self.history.append(("upsert", extension, "rejected"))
            raise RejectedByLms(f"assignment {extension.assignment_slug} is locked")
        key = (extension.student_email, extension.assignment_slug)
        resolved = resolve_upsert(self.state.get(key), extension.new_due_at, allow_shorten)
        changed = self.state.get(key) != resolved
        self.state[key] = resolved
        self.history.append(("upsert", extension, "changed" if changed else "noop"))
        return changed

    def list_extensions(self) -> dict[tuple[str, str], datetime]:
        return dict(self.state)


class FileConnector:
    """Fixture connector persisting to a JSON file.

    File format: an object mapping "email|slug" to an ISO-8601 due date,
    the contract a third-party connector's test fixtures follow.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("{}", encoding="utf-8")

    def _load(self) -> dict[str, str]:
        try:
            return json.loads(self.path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConnectorUnavailable(f"fixture file unreadable: {exc}") from exc

    def _save(self, data: dict[str, str]) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
        tmp.rename(self.path)

    def list_assignments(self) -> list[str]:
        return sorted({key.split("|", 1)[1] for key in self._load()})

    def get_extension(self, student_email: str, assignment_slug: str) -> Optional[datetime]:
        value = self._load().get(f"{student_email}|{assignment_slug}")
        return None if value is None else datetime.fromisoformat(value)

    def upsert_extension(self, extension: LmsExtension, allow_shorten: bool = False) -> bool:
        data = self._load()
        key = f"{extension.student_email}|{extension.assignment_slug}"
        existing = None if key not in data else datetime.fromisoformat(data[key])
        resolved = resolve_upsert(existing, extension.new_due_at, allow_shorten)
        if existing == resolved:
            return False
        data[key] = resolved.isoformat()
        self._save(data)
        return True

    def list_extensions(self) -> dict[tuple[str, str], datetime]:
        return {
            tuple(key.split("|", 1)): datetime.fromisoformat(value)
            for key, value in self._load().items()
        }


def _precheck(request: ExtensionRequest) -> None:
    """Prove the LmsApplied transition is legal before touching the
    platform, so denied or pending requests never reach the connector."""
    status = request.status
    if status is RequestStatus.APPLY_FAILED:
        resume = (
            RequestStatus.AUTO_APPROVED
            if request.decided_by == "policy"
            else RequestStatus.MANUAL_APPROVED
        )
        status = transition_request(status, RequestAction.RETRY, resume)
    transition_request(status, RequestAction.LMS_APPLIED)


def apply_extension(
    log: EventLog,
    connector: Connector,
    request: ExtensionRequest,
    new_due_at: datetime,
    now: datetime,
    allow_shorten: bool = False,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> str:
    """Push one approved extension; returns "applied", "retry", or
    "failed"."""
    _precheck(request)
    student = log.snapshot.students[str(request.student)]
    extension = LmsExtension(
        student_email=student.email,
        assignment_slug=request.assignment,
        new_due_at=new_due_at,
        source_request_id=request.id,
    )
    try:
        connector.upsert_extension(extension, allow_shorten)
    except ConnectorUnavailable as exc:
        attempts_after = request.lms_attempts + 1
        if attempts_after >= max_attempts:
            log.append(
                EventKind.LMS_FAILED,
                {"request_id": request.id, "error": str(exc), "terminal": True},
                at=now,
            )
            return "failed"
        delay = RETRY_BASE_SECONDS * RETRY_FACTOR ** (attempts_after - 1)
        log.append(
            EventKind.LMS_FAILED,
            {
                "request_id": request.id,
                "error": str(exc),
                "terminal": False,
                "next_attempt_at": (now + timedelta(seconds=delay)).isoformat(),
            },
            at=now,
        )
        return "retry"
    except RejectedByLms as exc:
        log.append(
            EventKind.LMS_FAILED,
            {"request_id": request.id, "error": f"rejected: {exc.reason}", "terminal": True},
            at=now,
        )
        return "failed"
    log.append(
        EventKind.LMS_APPLIED,
        {"request_id": request.id, "new_due_at": new_due_at.isoformat()},
        at=now,
    )
    return "applied"


@dataclass
class DriftReport:
    missing: list[dict] = field(default_factory=list)
    mismatched: list[dict] = field(default_factory=list)
    orphaned: list[dict] = field(default_factory=list)

    def is_clean(self) -> bool:
        return not (self.missing or self.mismatched or self.orphaned)

    def to_dict(self) -> dict:
        return {
            "missing": self.missing,
            "mismatched": self.mismatched,
            "orphaned": self.orphaned,
        }


def expected_extensions(snapshot: Snapshot) -> dict[tuple[str, str], datetime]:
    """What the platform should hold: per (email, slug), the longest
    extension across that student's approved requests.  Approved covers
    applied and not-yet-applied alike; an approval is a promise the
    platform must eventually reflect."""
    expected: dict[tuple[str, str], datetime] = {}
    for request in snapshot.requests.values():
        if request.status not in APPROVED_REQUEST_STATES or request.granted_days <= 0:
            continue
        student = snapshot.students[str(request.student)]
        assignment = snapshot.assignments[request.assignment]
        due = compute_new_due_date(assignment.due_at, request.granted_days)
        key = (student.email, request.assignment)
        if key not in expected or due > expected[key]:
            expected[key] = due
    return expected


def reconcile(connector: Connector, snapshot: Snapshot) -> DriftReport:
    """Read-only comparison of approved extensions vs platform state."""
    report = DriftReport()
    expected = expected_extensions(snapshot)
    actual = connector.list_extensions()
    for (email, slug), due in sorted(expected.items()):
        held = actual.get((email, slug))
        if held is None:
            report.missing.append(
                {"email": email, "assignment": slug, "expected": due.isoformat()}
            )
        elif held != due:
            report.mismatched.append(
                {
                    "email": email,
                    "assignment": slug,
                    "expected": due.isoformat(),
                    "actual": held.isoformat(),
                }
            )
    for (email, slug), held in sorted(actual.items()):
        if (email, slug) not in expected:
            report.orphaned.append(
                {"email": email, "assignment": slug, "actual": held.isoformat()}
            )
    return report
