"""Domain types and the two lifecycle state machines.

Every status change in the system goes through ``transition_request`` or
``transition_email``; the tables here are the single source of truth for
which moves are legal. Everything in this module is pure and value-based,
so it is safe to call from any thread.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Optional


class RequestStatus(str, Enum):
    """Lifecycle of one extension request."""

    RECEIVED = "received"
    INVALID = "invalid"
    AUTO_APPROVED = "auto_approved"
    PENDING_REVIEW = "pending_review"
    MANUAL_APPROVED = "manual_approved"
    MANUAL_DENIED = "manual_denied"
    APPLIED = "applied"
    APPLY_FAILED = "apply_failed"


class RequestAction(str, Enum):
    VALIDATE = "validate"
    INVALIDATE = "invalidate"
    POLICY_AUTO = "policy_auto"
    POLICY_ESCALATE = "policy_escalate"
    STAFF_APPROVE = "staff_approve"
    STAFF_DENY = "staff_deny"
    LMS_APPLIED = "lms_applied"
    LMS_FAILED = "lms_failed"
    RETRY = "retry"


class EmailStatus(str, Enum):
    """Lifecycle of one notification job."""

    AUTOMATIC = "automatic"
    PENDING_APPROVAL = "pending_approval"
    IN_QUEUE = "in_queue"
    MANUAL = "manual"
    SENT = "sent"
    FAILED = "failed"


class EmailAction(str, Enum):
    # DECISION_AUTO never appears in the transition table: it is the recorded
    # cause when a job is born directly in AUTOMATIC, not a move between states.
    DECISION_AUTO = "decision_auto"
    DECISION_READY = "decision_ready"
    NEEDS_HUMAN = "needs_human"
    DISPATCH = "dispatch"
    DELIVER_OK = "deliver_ok"
    DELIVER_FAIL = "deliver_fail"
    REQUEUE = "requeue"


class DecisionOutcome(str, Enum):
    AUTOMATIC = "automatic"
    PENDING_APPROVAL = "pending_approval"
    DENY = "deny"


class ViewerRole(str, Enum):
    FULL = "full"
    RESTRICTED = "restricted"


#: Requests in these states accept no further action.
TERMINAL_REQUEST_STATES = frozenset(
    {RequestStatus.INVALID, RequestStatus.MANUAL_DENIED, RequestStatus.APPLIED}
)

#: SENT absorbs every action. FAILED is terminal for the dispatcher; its one
#: escape hatch is an explicit REQUEUE back into the queue.
TERMINAL_EMAIL_STATES = frozenset({EmailStatus.SENT})

#: Statuses that carry an approval (a grant exists even if LMS apply failed).
APPROVED_REQUEST_STATES = frozenset(
    {
        RequestStatus.AUTO_APPROVED,
        RequestStatus.MANUAL_APPROVED,
        RequestStatus.APPLIED,
        RequestStatus.APPLY_FAILED,
    }
)


class IllegalTransition(Exception):
    """A (state, action) pair outside the transition table.

    Signals a programming or replay error; callers must never swallow it
    to force progress.
    """

    def __init__(self, current, action, detail: str = ""):
        self.current = current
        self.action = action
        msg = f"no transition from {current.value!r} on {action.value!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


# A request stays RECEIVED through intake validation; the policy step then
# routes it. RETRY is handled separately because its target depends on which
# approving state the request came from.
_REQUEST_TABLE = {
    (RequestStatus.RECEIVED, RequestAction.VALIDATE): RequestStatus.RECEIVED,
    (RequestStatus.RECEIVED, RequestAction.INVALIDATE): RequestStatus.INVALID,
    (RequestStatus.RECEIVED, RequestAction.POLICY_AUTO): RequestStatus.AUTO_APPROVED,
    (RequestStatus.RECEIVED, RequestAction.POLICY_ESCALATE): RequestStatus.PENDING_REVIEW,
    (RequestStatus.PENDING_REVIEW, RequestAction.STAFF_APPROVE): RequestStatus.MANUAL_APPROVED,
    (RequestStatus.PENDING_REVIEW, RequestAction.STAFF_DENY): RequestStatus.MANUAL_DENIED,
    (RequestStatus.AUTO_APPROVED, RequestAction.LMS_APPLIED): RequestStatus.APPLIED,
    (RequestStatus.AUTO_APPROVED, RequestAction.LMS_FAILED): RequestStatus.APPLY_FAILED,
    (RequestStatus.MANUAL_APPROVED, RequestAction.LMS_APPLIED): RequestStatus.APPLIED,
    (RequestStatus.MANUAL_APPROVED, RequestAction.LMS_FAILED): RequestStatus.APPLY_FAILED,
}

_RETRY_RESUME_STATES = frozenset({RequestStatus.AUTO_APPROVED, RequestStatus.MANUAL_APPROVED})

_EMAIL_TABLE = {
    (EmailStatus.PENDING_APPROVAL, EmailAction.DECISION_READY): EmailStatus.IN_QUEUE,
    (EmailStatus.PENDING_APPROVAL, EmailAction.NEEDS_HUMAN): EmailStatus.MANUAL,
    (EmailStatus.AUTOMATIC, EmailAction.DISPATCH): EmailStatus.AUTOMATIC,
    (EmailStatus.AUTOMATIC, EmailAction.DELIVER_OK): EmailStatus.SENT,
    (EmailStatus.AUTOMATIC, EmailAction.DELIVER_FAIL): EmailStatus.FAILED,
    (EmailStatus.IN_QUEUE, EmailAction.DISPATCH): EmailStatus.IN_QUEUE,
    (EmailStatus.IN_QUEUE, EmailAction.DELIVER_OK): EmailStatus.SENT,
    (EmailStatus.IN_QUEUE, EmailAction.DELIVER_FAIL): EmailStatus.FAILED,
    (EmailStatus.MANUAL, EmailAction.NEEDS_HUMAN): EmailStatus.MANUAL,
    (EmailStatus.FAILED, EmailAction.REQUEUE): EmailStatus.IN_QUEUE,
}


def transition_request(
    current: RequestStatus,
    action: RequestAction,
    resume_state: Optional[RequestStatus] = None,
) -> RequestStatus:
    """Return the successor state for a request, or raise IllegalTransition.

    ``resume_state`` is only consulted for (APPLY_FAILED, RETRY): a retried
    apply resumes the approving state it originally failed from, which the
    caller knows from the request's decision provenance.
    """
    if current == RequestStatus.APPLY_FAILED and action == RequestAction.RETRY:
        if resume_state in _RETRY_RESUME_STATES:
            return resume_state
        raise IllegalTransition(current, action, "retry needs an approving resume state")
    try:
        return _REQUEST_TABLE[(current, action)]
    except KeyError:
        raise IllegalTransition(current, action) from None


def transition_email(current: EmailStatus, action: EmailAction) -> EmailStatus:
    """Return the successor state for an email job, or raise IllegalTransition."""
    try:
        return _EMAIL_TABLE[(current, action)]
    except KeyError:
        raise IllegalTransition(current, action) from None


def request_successors(current: RequestStatus) -> set[RequestStatus]:
    """All states reachable in one step, counting both RETRY resume targets."""
    out = {to for (frm, _), to in _REQUEST_TABLE.items() if frm == current}
    if current == RequestStatus.APPLY_FAILED:
        out |= set(_RETRY_RESUME_STATES)
    return out


def email_successors(current: EmailStatus) -> set[EmailStatus]:
    return {to for (frm, _), to in _EMAIL_TABLE.items() if frm == current}


_STAFF_REQUEST_LABELS = {
    RequestStatus.RECEIVED: "received",
    RequestStatus.INVALID: "invalid",
    RequestStatus.AUTO_APPROVED: "automatic",
    RequestStatus.PENDING_REVIEW: "pending approval",
    RequestStatus.MANUAL_APPROVED: "manual",
    RequestStatus.MANUAL_DENIED: "manual",
}

_STAFF_EMAIL_LABELS = {
    EmailStatus.AUTOMATIC: "automatic",
    EmailStatus.PENDING_APPROVAL: "pending approval",
    EmailStatus.IN_QUEUE: "in queue",
    EmailStatus.MANUAL: "manual",
    EmailStatus.SENT: "sent",
    EmailStatus.FAILED: "failed",
}


def request_status_label(status: RequestStatus, decided_by: Optional[str] = None) -> str:
    """Course-staff vocabulary for a request state.

    APPLIED/APPLY_FAILED inherit the label of the decision that approved
    them: "automatic" when policy decided, "manual" when a staff member did.
    """
    if status in (RequestStatus.APPLIED, RequestStatus.APPLY_FAILED):
        return "automatic" if decided_by == POLICY_ACTOR else "manual"
    return _STAFF_REQUEST_LABELS[status]


def email_status_label(status: EmailStatus) -> str:
    return _STAFF_EMAIL_LABELS[status]


#: decided_by value for decisions made by the policy engine rather than a person.
POLICY_ACTOR = "policy"

_SID_RE = re.compile(r"^\d{3,12}$")


@dataclass(frozen=True)
class StudentId:
    """Normalized student id: 3 to 12 digits."""

    value: str

    def __post_init__(self):
        if not _SID_RE.match(self.value):
            raise ValueError(f"student id must be 3-12 digits, got {self.value!r}")

    def __str__(self) -> str:
        return self.value


@dataclass
class Student:
    id: StudentId
    name: str
    email: str
    dsp_registered: Optional[bool] = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("student name must be non-empty")
        if self.email.count("@") != 1:
            raise ValueError(f"bad email address: {self.email!r}")


#: Sentinel for assignments without a per-assignment extension ceiling.
UNLIMITED = None


@dataclass(frozen=True)
class Assignment:
    slug: str
    display_name: str
    due_at: datetime
    max_extension_days: Optional[int] = UNLIMITED  # None means unlimited

    def __post_init__(self):
        if self.max_extension_days is not None and self.max_extension_days < 1:
            raise ValueError("max_extension_days must be positive or unlimited")


@dataclass(frozen=True)
class PartnerLink:
    email: str
    sid: str


@dataclass
class ExtensionRequest:
    """One student-assignment-days request with audit fields.

    ``dsp_registered`` and ``reason`` are the sensitive answers that
    ``redact`` blanks for restricted viewers. ``origin_request_id`` is set
    on requests mirrored from a partner's submission.
    """

    id: str
    student: StudentId
    assignment: str
    days_requested: int
    reason: str
    submitted_at: datetime
    idempotency_key: str
    status: RequestStatus = RequestStatus.RECEIVED
    dsp_registered: Optional[bool] = None
    partner: Optional[PartnerLink] = None
    decided_by: Optional[str] = None
    granted_days: int = 0
    rule_fired: Optional[str] = None
    origin_request_id: Optional[str] = None
    lms_attempts: int = 0
    last_lms_error: str = ""
    next_lms_attempt_at: Optional[datetime] = None
    invalid_errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.days_requested < 1:
            raise ValueError("days_requested must be >= 1")


@dataclass
class EmailJob:
    """One notification with its own lifecycle, keyed (request, template)."""

    id: str
    request_id: str
    template_key: str
    to: str
    subject: str
    body: str
    status: EmailStatus
    attempts: int = 0
    last_error: str = ""
    next_attempt_at: Optional[datetime] = None


def email_job_id(request_id: str, template_key: str) -> str:
    """Deterministic job id; doubles as the exactly-once enqueue key."""
    return f"em-{request_id}-{template_key}"


@dataclass(frozen=True)
class Decision:
    outcome: DecisionOutcome
    granted_days: int
    rule_fired: str

    def __post_init__(self):
        if self.outcome == DecisionOutcome.DENY and self.granted_days != 0:
            raise ValueError("denied decisions grant zero days")
        if self.granted_days < 0:
            raise ValueError("granted_days must be non-negative")


def make_idempotency_key(sid: str, assignment_slug: str, submitted_at: datetime) -> str:
    """Stable key for (student, assignment, submission time).

    Re-submitting the same form row, or re-ingesting the same CSV, maps to
    the same key and is skipped as a duplicate.
    """
    raw = f"{sid}|{assignment_slug}|{submitted_at.isoformat()}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def request_id_for_key(idempotency_key: str) -> str:
    return "req-" + idempotency_key[:16]


def redact(request: ExtensionRequest, viewer_role: ViewerRole) -> ExtensionRequest:
    """Viewer-scoped copy of a request.

    Restricted viewers never see the stated reason or the disability-program
    answer; everything else (ids, assignment, days, timestamps) is untouched.
    Idempotent: redacting a redacted view changes nothing.
    """
    if viewer_role == ViewerRole.FULL:
        return request
    return replace(request, reason="", dsp_registered=None)
