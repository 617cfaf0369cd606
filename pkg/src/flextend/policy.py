"""Decision rules: automatic grant, escalation to staff, or denial.

All thresholds live in :class:`PolicyConfig`; courses tune them per policy,
nothing is hard-coded. Denial is deliberately narrow (closed request window
or an assignment marked ineligible). Every other failed check escalates to
a human instead of denying, and the stated reason for a request is never
consulted here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Mapping, Optional, Sequence

from .model import (
    APPROVED_REQUEST_STATES,
    Decision,
    DecisionOutcome,
    ExtensionRequest,
    RequestStatus,
    Student,
    make_idempotency_key,
    request_id_for_key,
)

RULE_INELIGIBLE = "ineligible_assignment"
RULE_WINDOW = "outside_window"
RULE_CUMULATIVE = "cumulative"
RULE_PER_REQUEST = "per_request_cap"
RULE_REQUEST_COUNT = "request_count"
RULE_ASSIGNMENT_MAX = "assignment_max_days"
RULE_ALL_PASSED = "all_auto_rules_passed"
RULE_PARTNER_MIRROR = "partner_mirror"


class PartnerUnknown(Exception):
    """Partner sid matches no student seen so far; mirror skipped."""

    def __init__(self, sid: str):
        self.sid = sid
        super().__init__(f"partner student id {sid} is not known to the course")


@dataclass(frozen=True)
class AssignmentOverride:
    """Per-assignment exception: fully ineligible, or a tighter auto cap."""

    ineligible: bool = False
    max_days: Optional[int] = None


@dataclass(frozen=True)
class PolicyConfig:
    """Declarative thresholds for routing a request.

    Defaults are illustrative starting points, not recommendations; each
    course sets its own. The DSP cap must be at least the general cap since
    disability-program registration only ever widens what auto-approval
    allows.
    """

    auto_max_days_per_request: int = 3
    auto_max_cumulative_days: int = 7
    dsp_auto_max_days_per_request: int = 5
    escalate_after_n_requests: int = 6
    assignment_overrides: Mapping[str, AssignmentOverride] = field(default_factory=dict)
    request_window: Optional[tuple[datetime, datetime]] = None
    manual_denials: bool = False

    def __post_init__(self):
        if self.auto_max_days_per_request < 1 or self.auto_max_cumulative_days < 1:
            raise ValueError("per-request and cumulative caps must be positive")
        if self.escalate_after_n_requests < 1:
            raise ValueError("escalate_after_n_requests must be positive")
        if self.dsp_auto_max_days_per_request < self.auto_max_days_per_request:
            raise ValueError("DSP cap must be >= the general per-request cap")
        if self.request_window is not None:
            open_at, close_at = self.request_window
            if open_at >= close_at:
                raise ValueError("request window must open before it closes")


@dataclass(frozen=True)
class HistoryEntry:
    """One prior request by the same student, any assignment."""

    assignment: str
    days: int
    status: RequestStatus
    submitted_at: datetime


def evaluate(
    request: ExtensionRequest,
    history: Sequence[HistoryEntry],
    student: Student,
    config: PolicyConfig,
) -> Decision:
    """Route one validated request.

    Checks run in a fixed order and the first failure names the rule in
    ``Decision.rule_fired``. Deny can only come from the ineligibility and
    window rules; all other failures escalate. Pure: same inputs, same
    decision.
    """
    override = config.assignment_overrides.get(request.assignment)
    if override is not None and override.ineligible:
        return Decision(DecisionOutcome.DENY, 0, RULE_INELIGIBLE)
    if config.request_window is not None:
        open_at, close_at = config.request_window
        if not open_at <= request.submitted_at <= close_at:
            return Decision(DecisionOutcome.DENY, 0, RULE_WINDOW)

    escalate = _first_failed_auto_rule(request, history, student, config, override)
    if escalate is not None:
        return Decision(DecisionOutcome.PENDING_APPROVAL, request.days_requested, escalate)
    return Decision(DecisionOutcome.AUTOMATIC, request.days_requested, RULE_ALL_PASSED)


def _first_failed_auto_rule(request, history, student, config, override) -> Optional[str]:
    # Grants replace with the maximum rather than accumulate, so the
    # projection is max(already approved, asked now) for this assignment.
    approved_days = [
        h.days
        for h in history
        if h.assignment == request.assignment and h.status in APPROVED_REQUEST_STATES
    ]
    projected = max(approved_days + [request.days_requested])
    if projected > config.auto_max_cumulative_days:
        return RULE_CUMULATIVE

    per_request_cap = (
        config.dsp_auto_max_days_per_request
        if student.dsp_registered
        else config.auto_max_days_per_request
    )
    if request.days_requested > per_request_cap:
        return RULE_PER_REQUEST

    if len(history) >= config.escalate_after_n_requests:
        return RULE_REQUEST_COUNT

    if override is not None and override.max_days is not None:
        if request.days_requested > override.max_days:
            return RULE_ASSIGNMENT_MAX
    return None


def compute_new_due_date(due_at: datetime, granted_days: int) -> datetime:
    """Push a deadline out by whole days, preserving the UTC time of day."""
    if granted_days < 1:
        raise ValueError("granted_days must be >= 1")
    return due_at + timedelta(days=granted_days)


def mirror_for_partner(
    request: ExtensionRequest,
    decision: Decision,
    known_student,
) -> Optional[ExtensionRequest]:
    """Build the partner's mirrored request, if one is due.

    ``known_student`` maps a sid string to a Student or None. Mirrors carry
    the origin request id, never a partner of their own (propagation cannot
    chain), and no reason text: the stated reason belongs to the requester
    who wrote it. Raises PartnerUnknown when the sid has never been seen;
    the caller records a warning and the original request stands.
    """
    if request.partner is None or request.origin_request_id is not None:
        return None
    partner_sid = request.partner.sid
    if partner_sid == str(request.student):
        return None  # self-partnering is meaningless
    partner = known_student(partner_sid)
    if partner is None:
        raise PartnerUnknown(partner_sid)
    key = make_idempotency_key(partner_sid, request.assignment, request.submitted_at)
    return ExtensionRequest(
        id=request_id_for_key(key),
        student=partner.id,
        assignment=request.assignment,
        days_requested=request.days_requested,
        reason="",
        submitted_at=request.submitted_at,
        idempotency_key=key,
        dsp_registered=None,
        partner=None,
        origin_request_id=request.id,
    )
