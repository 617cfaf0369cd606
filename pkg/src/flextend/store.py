"""Append-only event log and the snapshot folded from it.

Every state change in the service is an event appended to an NDJSON log.
The in-memory snapshot is a pure fold over those events, so replaying the
log from disk reproduces the exact same state.  Appends are two-phase:
an event is first planned against the current snapshot (all validation
happens here, including state-machine legality), then written to disk,
then committed to the snapshot.  A rejected event therefore never
touches the log, and an I/O failure never half-applies an event.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from .model import (
    POLICY_ACTOR,
    Assignment,
    EmailAction,
    EmailJob,
    EmailStatus,
    ExtensionRequest,
    PartnerLink,
    RequestAction,
    RequestStatus,
    Student,
    StudentId,
    transition_email,
    transition_request,
)

LOG_VERSION = 1


class EventKind(str, Enum):
    REQUEST_RECEIVED = "request_received"
    REQUEST_INVALID = "request_invalid"
    DECISION_MADE = "decision_made"
    STAFF_DECISION = "staff_decision"
    EMAIL_QUEUED = "email_queued"
    EMAIL_SENT = "email_sent"
    EMAIL_FAILED = "email_failed"
    LMS_APPLIED = "lms_applied"
    LMS_FAILED = "lms_failed"
    PARTNER_MIRRORED = "partner_mirrored"
    WARNING = "warning"


class CorruptLog(Exception):
    """The log cannot be replayed: gap, parse failure, or unknown event."""

    def __init__(self, line_no: int, detail: str):
        self.line_no = line_no
        self.detail = detail
        super().__init__(f"line {line_no}: {detail}")


class CoherenceError(Exception):
    """The request and email lifecycles disagree after applying an event."""


class DuplicateRequest(Exception):
    """A request with this id or idempotency key already exists."""

    def __init__(self, request_id: str):
        self.request_id = request_id
        super().__init__(request_id)


class DuplicateJob(Exception):
    """An email job with this id already exists."""

    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(job_id)


@dataclass(frozen=True)
class Event:
    seq: int
    at: datetime
    kind: EventKind
    actor: str
    payload: dict

    def to_line(self) -> str:
        record = {
            "v": LOG_VERSION,
            "seq": self.seq,
            "at": self.at.isoformat(),
            "kind": self.kind.value,
            "actor": self.actor,
            "payload": self.payload,
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_line(line: str, line_no: int) -> "Event":
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptLog(line_no, f"not valid JSON: {exc.msg}") from exc
        if not isinstance(record, dict):
            raise CorruptLog(line_no, "event is not a JSON object")
        if record.get("v") != LOG_VERSION:
            raise CorruptLog(line_no, f"unsupported log version {record.get('v')!r}")
        try:
            kind = EventKind(record["kind"])
        except (KeyError, ValueError):
            raise CorruptLog(line_no, f"unknown event kind {record.get('kind')!r}")
        try:
            return Event(
                seq=int(record["seq"]),
                at=datetime.fromisoformat(record["at"]),
                kind=kind,
                actor=str(record["actor"]),
                payload=dict(record["payload"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptLog(line_no, f"malformed event: {exc}") from exc


def _parse_dt(value: str) -> datetime:
    parsed = datetime.fromisoformat(value)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


@dataclass
class Snapshot:
    """Materialized state: the fold of every event applied so far.

    ``assignments`` is rebuilt from event payloads, not read from config,
    so a replayed log stands on its own even if the catalog later changes.
    """

    requests: dict[str, ExtensionRequest] = field(default_factory=dict)
    email_jobs: dict[str, EmailJob] = field(default_factory=dict)
    students: dict[str, Student] = field(default_factory=dict)
    assignments: dict[str, Assignment] = field(default_factory=dict)
    last_seq: int = 0
    # Derived indexes, maintained alongside the core maps.
    jobs_by_request: dict[str, list[str]] = field(default_factory=dict)
    key_to_request: dict[str, str] = field(default_factory=dict)

    def canonical_dict(self) -> dict:
        return {
            "last_seq": self.last_seq,
            "requests": {rid: _request_dict(r) for rid, r in self.requests.items()},
            "email_jobs": {jid: _job_dict(j) for jid, j in self.email_jobs.items()},
            "students": {sid: _student_dict(s) for sid, s in self.students.items()},
            "assignments": {
                slug: _assignment_dict(a) for slug, a in self.assignments.items()
            },
        }

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.canonical_dict(), sort_keys=True).encode("utf-8")

    def jobs_for(self, request_id: str) -> list[EmailJob]:
        return [self.email_jobs[j] for j in self.jobs_by_request.get(request_id, [])]

    def requests_for_student(self, sid: str) -> list[ExtensionRequest]:
        return [r for r in self.requests.values() if str(r.student) == sid]


def _request_dict(r: ExtensionRequest) -> dict:
    return {
        "id": r.id,
        "sid": str(r.student),
        "assignment": r.assignment,
        "days_requested": r.days_requested,
        "reason": r.reason,
        "submitted_at": r.submitted_at.isoformat(),
        "idempotency_key": r.idempotency_key,
        "status": r.status.value,
        "dsp_registered": r.dsp_registered,
        "partner": None
        if r.partner is None
        else {"email": r.partner.email, "sid": r.partner.sid},
        "decided_by": r.decided_by,
        "granted_days": r.granted_days,
        "rule_fired": r.rule_fired,
        "origin_request_id": r.origin_request_id,
        "lms_attempts": r.lms_attempts,
        "last_lms_error": r.last_lms_error,
        "next_lms_attempt_at": None
        if r.next_lms_attempt_at is None
        else r.next_lms_attempt_at.isoformat(),
        "invalid_errors": list(r.invalid_errors),
    }


def _job_dict(j: EmailJob) -> dict:
    return {
        "id": j.id,
        "request_id": j.request_id,
        "template_key": j.template_key,
        "to": j.to,
        "subject": j.subject,
        "body": j.body,
        "status": j.status.value,
        "attempts": j.attempts,
        "last_error": j.last_error,
        "next_attempt_at": None
        if j.next_attempt_at is None
        else j.next_attempt_at.isoformat(),
    }


def _student_dict(s: Student) -> dict:
    return {
        "sid": str(s.id),
        "name": s.name,
        "email": s.email,
        "dsp_registered": s.dsp_registered,
    }


def _assignment_dict(a: Assignment) -> dict:
    return {
        "slug": a.slug,
        "display_name": a.display_name,
        "due_at": a.due_at.isoformat(),
        "max_extension_days": a.max_extension_days,
    }


Commit = Callable[[], None]


def _check_coherence(snapshot: Snapshot, request_id: Optional[str]) -> None:
    """The escalation email and its request must agree on being pending.

    A PendingApproval job may only belong to a PendingReview request.  In
    the other direction, a PendingReview request that already has email
    jobs must have exactly one PendingApproval job among them; the window
    between the escalation decision and the enqueue of its acknowledgment
    (when the request has no jobs at all yet) is the one allowed gap.
    """
    if request_id is None:
        return
    request = snapshot.requests.get(request_id)
    if request is None:
        return
    jobs = snapshot.jobs_for(request_id)
    pending_jobs = [j for j in jobs if j.status is EmailStatus.PENDING_APPROVAL]
    if pending_jobs and request.status is not RequestStatus.PENDING_REVIEW:
        raise CoherenceError(
            f"request {request_id} is {request.status.value} but has "
            f"pending-approval email job {pending_jobs[0].id}"
        )
    if request.status is RequestStatus.PENDING_REVIEW and jobs and len(pending_jobs) != 1:
        raise CoherenceError(
            f"request {request_id} is pending review with {len(pending_jobs)} "
            "pending-approval email jobs; expected exactly one"
        )


def _plan_request_received(snapshot: Snapshot, event: Event) -> Commit:
    p = event.payload
    request_id = p["request_id"]
    if request_id in snapshot.requests:
        raise DuplicateRequest(request_id)
    key = p["idempotency_key"]
    if key in snapshot.key_to_request:
        raise DuplicateRequest(snapshot.key_to_request[key])
    sid = StudentId(p["sid"])
    student = Student(
        id=sid,
        name=p["name"],
        email=p["email"],
        dsp_registered=p.get("dsp_registered"),
    )
    partner = None
    if p.get("partner") is not None:
        partner = PartnerLink(email=p["partner"]["email"], sid=p["partner"]["sid"])
    a = p["assignment"]
    assignment = Assignment(
        slug=a["slug"],
        display_name=a["display_name"],
        due_at=_parse_dt(a["due_at"]),
        max_extension_days=a.get("max_extension_days"),
    )
    request = ExtensionRequest(
        id=request_id,
        student=sid,
        assignment=assignment.slug,
        days_requested=int(p["days_requested"]),
        reason=p["reason"],
        submitted_at=_parse_dt(p["submitted_at"]),
        idempotency_key=key,
        dsp_registered=p.get("dsp_registered"),
        partner=partner,
        origin_request_id=p.get("origin_request_id"),
    )

    def commit() -> None:
        snapshot.requests[request_id] = request
        snapshot.key_to_request[key] = request_id
        snapshot.jobs_by_request.setdefault(request_id, [])
        snapshot.assignments[assignment.slug] = assignment
        _upsert_student(snapshot, student)

    return commit


def _upsert_student(snapshot: Snapshot, incoming: Student) -> None:
    sid = str(incoming.id)
    existing = snapshot.students.get(sid)
    if existing is None:
        snapshot.students[sid] = incoming
        return
    # A later submission refreshes name and email; the DSP flag is only
    # replaced when the new event actually answered the question, so a
    # mirrored request (which carries none) cannot erase it.
    dsp = incoming.dsp_registered if incoming.dsp_registered is not None else existing.dsp_registered
    snapshot.students[sid] = Student(
        id=incoming.id, name=incoming.name, email=incoming.email, dsp_registered=dsp
    )


def _get_request(snapshot: Snapshot, event: Event) -> ExtensionRequest:
    request_id = event.payload["request_id"]
    request = snapshot.requests.get(request_id)
    if request is None:
        raise KeyError(f"unknown request {request_id}")
    return request


def _plan_request_invalid(snapshot: Snapshot, event: Event) -> Commit:
    request = _get_request(snapshot, event)
    new_status = transition_request(request.status, RequestAction.INVALIDATE)
    errors = [str(e) for e in event.payload.get("errors", [])]

    def commit() -> None:
        request.status = new_status
        request.invalid_errors = errors

    return commit


def _plan_decision_made(snapshot: Snapshot, event: Event) -> Commit:
    request = _get_request(snapshot, event)
    p = event.payload
    outcome = p["outcome"]
    # Deciding a fresh request implies it passed validation.
    status = transition_request(request.status, RequestAction.VALIDATE)
    if outcome == "automatic":
        status = transition_request(status, RequestAction.POLICY_AUTO)
    elif outcome == "pending_approval":
        status = transition_request(status, RequestAction.POLICY_ESCALATE)
    elif outcome == "deny":
        # A policy denial is an escalation the policy itself resolves, so
        # the record lands in ManualDenied with the policy as decider.
        status = transition_request(status, RequestAction.POLICY_ESCALATE)
        status = transition_request(status, RequestAction.STAFF_DENY)
    else:
        raise ValueError(f"unknown decision outcome {outcome!r}")
    granted = int(p["granted_days"])

    def commit() -> None:
        request.status = status
        request.decided_by = None if outcome == "pending_approval" else POLICY_ACTOR
        request.granted_days = granted
        request.rule_fired = p["rule_fired"]

    return commit


def _plan_staff_decision(snapshot: Snapshot, event: Event) -> Commit:
    request = _get_request(snapshot, event)
    p = event.payload
    action = (
        RequestAction.STAFF_APPROVE if p["action"] == "approve" else RequestAction.STAFF_DENY
    )
    new_status = transition_request(request.status, action)
    granted = int(p["granted_days"])
    # The pending acknowledgment email moves in the same event, so the
    # two lifecycles never disagree between appends.
    disposition = p.get("ack_disposition", "in_queue")
    email_action = (
        EmailAction.DECISION_READY if disposition == "in_queue" else EmailAction.NEEDS_HUMAN
    )
    ack_moves = [
        (job, transition_email(job.status, email_action))
        for job in snapshot.jobs_for(request.id)
        if job.status is EmailStatus.PENDING_APPROVAL
    ]

    def commit() -> None:
        request.status = new_status
        request.decided_by = p["staff_id"]
        request.granted_days = granted
        for job, job_status in ack_moves:
            job.status = job_status

    return commit


def _plan_email_queued(snapshot: Snapshot, event: Event) -> Commit:
    p = event.payload
    job_id = p["job_id"]
    if p.get("requeue", False):
        # Queued again by an operator: the one legal exit from Failed.
        job = snapshot.email_jobs.get(job_id)
        if job is None:
            raise KeyError(f"unknown email job {job_id}")
        new_status = transition_email(job.status, EmailAction.REQUEUE)

        def commit_requeue() -> None:
            job.status = new_status
            job.attempts = 0
            job.last_error = ""
            job.next_attempt_at = None

        return commit_requeue

    if job_id in snapshot.email_jobs:
        raise DuplicateJob(job_id)
    request = snapshot.requests.get(p["request_id"])
    if request is None:
        raise KeyError(f"unknown request {p['request_id']}")
    status = EmailStatus(p["status"])
    # Unvalidated and invalid requests never produce email.
    if request.status in (RequestStatus.RECEIVED, RequestStatus.INVALID):
        raise CoherenceError(
            f"email queued for request {request.id} in state {request.status.value}"
        )
    if status is EmailStatus.PENDING_APPROVAL and request.status is not RequestStatus.PENDING_REVIEW:
        raise CoherenceError(
            f"pending-approval email queued for request {request.id} "
            f"in state {request.status.value}"
        )
    job = EmailJob(
        id=job_id,
        request_id=p["request_id"],
        template_key=p["template_key"],
        to=p["to"],
        subject=p["subject"],
        body=p["body"],
        status=status,
    )

    def commit() -> None:
        snapshot.email_jobs[job_id] = job
        snapshot.jobs_by_request.setdefault(job.request_id, []).append(job_id)

    return commit


def _get_job(snapshot: Snapshot, event: Event) -> EmailJob:
    job_id = event.payload["job_id"]
    job = snapshot.email_jobs.get(job_id)
    if job is None:
        raise KeyError(f"unknown email job {job_id}")
    return job


def _plan_email_sent(snapshot: Snapshot, event: Event) -> Commit:
    job = _get_job(snapshot, event)
    new_status = transition_email(job.status, EmailAction.DELIVER_OK)

    def commit() -> None:
        job.status = new_status
        job.attempts += 1
        job.last_error = ""
        job.next_attempt_at = None

    return commit


def _plan_email_failed(snapshot: Snapshot, event: Event) -> Commit:
    job = _get_job(snapshot, event)
    p = event.payload
    if p.get("terminal", False):
        new_status = transition_email(job.status, EmailAction.DELIVER_FAIL)
        next_at = None
    else:
        # A retryable failure keeps the job dispatchable; Dispatch is the
        # self-loop that proves the state allows another attempt.
        new_status = transition_email(job.status, EmailAction.DISPATCH)
        next_at = _parse_dt(p["next_attempt_at"])

    def commit() -> None:
        job.status = new_status
        job.attempts += 1
        job.last_error = p.get("error", "")
        job.next_attempt_at = next_at

    return commit


def _resume_state(request: ExtensionRequest) -> RequestStatus:
    return (
        RequestStatus.AUTO_APPROVED
        if request.decided_by == POLICY_ACTOR
        else RequestStatus.MANUAL_APPROVED
    )


def _plan_lms_applied(snapshot: Snapshot, event: Event) -> Commit:
    request = _get_request(snapshot, event)
    status = request.status
    if status is RequestStatus.APPLY_FAILED:
        status = transition_request(status, RequestAction.RETRY, _resume_state(request))
    new_status = transition_request(status, RequestAction.LMS_APPLIED)

    def commit() -> None:
        request.status = new_status
        request.lms_attempts += 1
        request.last_lms_error = ""
        request.next_lms_attempt_at = None

    return commit


def _plan_lms_failed(snapshot: Snapshot, event: Event) -> Commit:
    request = _get_request(snapshot, event)
    p = event.payload
    status = request.status
    if status is RequestStatus.APPLY_FAILED:
        status = transition_request(status, RequestAction.RETRY, _resume_state(request))
    new_status = transition_request(status, RequestAction.LMS_FAILED)
    next_at = None if p.get("terminal", False) else _parse_dt(p["next_attempt_at"])

    def commit() -> None:
        request.status = new_status
        request.lms_attempts += 1
        request.last_lms_error = p.get("error", "")
        request.next_lms_attempt_at = next_at

    return commit


def _plan_warning(snapshot: Snapshot, event: Event) -> Commit:
    # Warnings are kept for the audit trail; they change no state.
    return lambda: None


_PLANNERS: dict[EventKind, Callable[[Snapshot, Event], Commit]] = {
    EventKind.REQUEST_RECEIVED: _plan_request_received,
    EventKind.PARTNER_MIRRORED: _plan_request_received,
    EventKind.REQUEST_INVALID: _plan_request_invalid,
    EventKind.DECISION_MADE: _plan_decision_made,
    EventKind.STAFF_DECISION: _plan_staff_decision,
    EventKind.EMAIL_QUEUED: _plan_email_queued,
    EventKind.EMAIL_SENT: _plan_email_sent,
    EventKind.EMAIL_FAILED: _plan_email_failed,
    EventKind.LMS_APPLIED: _plan_lms_applied,
    EventKind.LMS_FAILED: _plan_lms_failed,
    EventKind.WARNING: _plan_warning,
}


def _affected_request_id(snapshot: Snapshot, event: Event) -> Optional[str]:
    rid = event.payload.get("request_id")
    if rid is not None:
        return rid
    job_id = event.payload.get("job_id")
    if job_id is not None and job_id in snapshot.email_jobs:
        return snapshot.email_jobs[job_id].request_id
    return None


def apply_event(snapshot: Snapshot, event: Event) -> None:
    """Validate the event against the snapshot, then fold it in."""
    commit = _PLANNERS[event.kind](snapshot, event)
    commit()
    snapshot.last_seq = event.seq
    _check_coherence(snapshot, _affected_request_id(snapshot, event))


class EventLog:
    """Durable NDJSON event log with a live snapshot.

    With no path the log lives in memory only; tests use that mode to
    compare live state against a replay of the serialized lines.
    """

    def __init__(self, path: Optional[Path] = None, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.lock = threading.RLock()
        self.snapshot = Snapshot()
        self.events: list[Event] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._load_existing()
            self._fh = open(self.path, "a", encoding="utf-8")

    def _load_existing(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            for event in iter_events(ln.rstrip("\n") for ln in fh):
                apply_event(self.snapshot, event)
                self.events.append(event)

    def close(self) -> None:
        with self.lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def append(
        self,
        kind: EventKind,
        payload: dict,
        actor: str = "system",
        at: Optional[datetime] = None,
    ) -> Event:
        """Plan, persist, then commit one event.  A raise leaves no trace."""
        with self.lock:
            event = Event(
                seq=self.snapshot.last_seq + 1,
                at=at if at is not None else datetime.now(timezone.utc),
                kind=kind,
                actor=actor,
                payload=payload,
            )
            commit = _PLANNERS[kind](self.snapshot, event)
            line = event.to_line()
            if self._fh is not None:
                self._fh.write(line + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            commit()
            self.snapshot.last_seq = event.seq
            self.events.append(event)
            _check_coherence(self.snapshot, _affected_request_id(self.snapshot, event))
            return event

    def events_since(self, seq: int) -> list[Event]:
        with self.lock:
            return [e for e in self.events if e.seq > seq]


def iter_events(lines: Iterable[str]) -> Iterable[Event]:
    """Parse NDJSON lines into events, enforcing dense sequence numbers."""
    expected = 1
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            raise CorruptLog(line_no, "blank line inside log")
        event = Event.from_line(line, line_no)
        if event.seq != expected:
            raise CorruptLog(line_no, f"sequence gap: expected {expected}, found {event.seq}")
        expected += 1
        yield event


def replay(source) -> Snapshot:
    """Fold a log (path or iterable of lines) into a fresh snapshot."""
    snapshot = Snapshot()
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    else:
        lines = list(source)
    for line_no, event in enumerate(iter_events(lines), start=1):
        try:
            apply_event(snapshot, event)
        except CorruptLog:
            raise
        except Exception as exc:
            raise CorruptLog(line_no, f"event could not be applied: {exc}") from exc
    return snapshot
