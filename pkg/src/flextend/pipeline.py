"""The end-to-end flow: submission -> policy -> partner -> email -> LMS.

``ExtensionService`` owns the event log, the notifier, and the
connector, and is the only writer.  Submissions are serialized per
student (a request and its partner mirror lock both students in sorted
order), so no decision ever reads a stale cumulative total.  Delivery
and LMS application run in ``dispatch_cycle``, typically on a timer.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, field as dataclass_field
from datetime import datetime, timezone
from typing import Callable, Optional

from .config import AppConfig
from .ingestion import (
    IngestReport,
    SubmissionDraft,
    ingest_csv,
    match_assignment,
    parse_json_submission,
)
from .lms import (
    DEFAULT_MAX_ATTEMPTS as LMS_MAX_ATTEMPTS,
    Connector,
    FileConnector,
    MockConnector,
    apply_extension,
    reconcile,
)
from .model import (
    POLICY_ACTOR,
    Assignment,
    ExtensionRequest,
    RequestStatus,
    Student,
    make_idempotency_key,
    request_id_for_key,
    request_status_label,
)
from .notifier import EmlFileSender, Notifier, Sender, load_templates
from .policy import (
    RULE_PARTNER_MIRROR,
    HistoryEntry,
    PartnerUnknown,
    compute_new_due_date,
    evaluate,
    mirror_for_partner,
)
from .store import EventKind, EventLog


class UnknownRequest(Exception):
    def __init__(self, request_id: str):
        self.request_id = request_id
        super().__init__(f"no request {request_id}")


class AlreadyDecided(Exception):
    """The request is not awaiting review (decided already, or never
    escalated)."""

    def __init__(self, request_id: str, status_label: str):
        self.request_id = request_id
        self.status_label = status_label
        super().__init__(f"request {request_id} is {status_label}, not pending review")


@dataclass
class SubmitOutcome:
    request_id: str
    status_label: str
    duplicate: bool = False
    granted_days: int = 0
    rule_fired: Optional[str] = None
    warnings: list[str] = dataclass_field(default_factory=list)
    mirrored_request_id: Optional[str] = None
    invalid_errors: list[str] = dataclass_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "status": self.status_label,
            "duplicate": self.duplicate,
            "granted_days": self.granted_days,
            "rule_fired": self.rule_fired,
            "warnings": self.warnings,
            "mirrored_request_id": self.mirrored_request_id,
            "invalid_errors": self.invalid_errors,
        }


def placeholder_email(sid: str) -> str:
    """Stable stand-in when the submission carried no address; .invalid
    can never be delivered to by accident."""
    return f"student-{sid}@students.invalid"


#: History includes everything that still counts against the student:
#: invalid and denied requests consume no budget and are excluded.
_HISTORY_EXCLUDED = (RequestStatus.INVALID, RequestStatus.MANUAL_DENIED)


class ExtensionService:
    def __init__(
        self,
        config: AppConfig,
        log: EventLog,
        connector: Connector,
        sender: Optional[Sender] = None,
        clock: Optional[Callable[[], datetime]] = None,
    ):
        self.config = config
        self.log = log
        self.connector = connector
        self.sender = sender or EmlFileSender(config.outbox_dir, config.email.from_addr)
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.notifier = Notifier(
            log,
            templates=load_templates(config.templates_dir),
            course_name=config.course_name,
            from_addr=config.email.from_addr,
            manual_denials=config.policy.manual_denials,
            max_attempts=config.email.max_attempts,
        )
        self.catalog = {a.slug: a for a in config.assignments}
        self._student_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._dispatch_lock = threading.Lock()

    @classmethod
    def from_config(cls, config: AppConfig) -> "ExtensionService":
        log = EventLog(config.log_path, fsync=config.fsync)
        if config.connector.kind == "file":
            connector: Connector = FileConnector(config.connector.path)
        else:
            connector = MockConnector([a.slug for a in config.assignments])
        return cls(config, log, connector)

    def _locks_for(self, sids: set[str]):
        with self._locks_guard:
            return [self._student_locks[sid] for sid in sorted(sids)]

    def _now(self) -> datetime:
        return self.clock()

    # -- submission ----------------------------------------------------

    def submit(self, draft: SubmissionDraft, assignment: Assignment) -> SubmitOutcome:
        """Run one draft through the whole decision pipeline."""
        sids = {draft.sid}
        if draft.partner is not None:
            sids.add(draft.partner.sid)
        locks = self._locks_for(sids)
        for lock in locks:
            lock.acquire()
        try:
            return self._submit_locked(draft, assignment)
        finally:
            for lock in reversed(locks):
                lock.release()

    def _submit_locked(self, draft: SubmissionDraft, assignment: Assignment) -> SubmitOutcome:
        snapshot = self.log.snapshot
        key = make_idempotency_key(draft.sid, assignment.slug, draft.submitted_at)
        if key in snapshot.key_to_request:
            existing = snapshot.requests[snapshot.key_to_request[key]]
            return SubmitOutcome(
                request_id=existing.id,
                status_label=request_status_label(existing.status, existing.decided_by),
                duplicate=True,
            )
        request_id = request_id_for_key(key)
        name, email = self._resolve_identity(draft)
        self.log.append(
            EventKind.REQUEST_RECEIVED,
            {
                "request_id": request_id,
                "sid": draft.sid,
                "name": name,
                "email": email,
                "assignment": self._assignment_payload(assignment),
                "days_requested": draft.days,
                "reason": draft.reason,
                "submitted_at": draft.submitted_at.isoformat(),
                "idempotency_key": key,
                "dsp_registered": draft.dsp,
                "partner": None
                if draft.partner is None
                else {"email": draft.partner.email, "sid": draft.partner.sid},
                "origin_request_id": None,
            },
            at=self._now(),
        )
        for warning in draft.warnings:
            self._warn(request_id, warning)

        ceiling = assignment.max_extension_days
        if ceiling is not None and draft.days > ceiling:
            error = (
                f"{assignment.slug} allows at most {ceiling} extension day(s); "
                f"{draft.days} requested"
            )
            self.log.append(
                EventKind.REQUEST_INVALID,
                {"request_id": request_id, "errors": [error]},
                at=self._now(),
            )
            return SubmitOutcome(
                request_id=request_id,
                status_label=request_status_label(RequestStatus.INVALID),
                invalid_errors=[error],
            )

        request = self.log.snapshot.requests[request_id]
        student = self.log.snapshot.students[draft.sid]
        decision = evaluate(request, self._history(draft.sid, request_id), student, self.config.policy)
        self.log.append(
            EventKind.DECISION_MADE,
            {
                "request_id": request_id,
                "outcome": decision.outcome.value,
                "granted_days": decision.granted_days,
                "rule_fired": decision.rule_fired,
            },
            actor=POLICY_ACTOR,
            at=self._now(),
        )
        request = self.log.snapshot.requests[request_id]
        self.notifier.enqueue_for_decision(request, at=self._now())
        mirrored_id = self._mirror_partner(request, decision)

        return SubmitOutcome(
            request_id=request_id,
            status_label=request_status_label(request.status, request.decided_by),
            granted_days=request.granted_days,
            rule_fired=request.rule_fired,
            warnings=list(draft.warnings),
            mirrored_request_id=mirrored_id,
        )

    def _resolve_identity(self, draft: SubmissionDraft) -> tuple[str, str]:
        """Fill name/email gaps from what we already know of the student."""
        known = self.log.snapshot.students.get(draft.sid)
        name = draft.name
        if name == f"Student {draft.sid}" and known is not None:
            name = known.name
        email = draft.email
        if not email:
            email = known.email if known is not None else placeholder_email(draft.sid)
        return name, email

    def _assignment_payload(self, assignment: Assignment) -> dict:
        return {
            "slug": assignment.slug,
            "display_name": assignment.display_name,
            "due_at": assignment.due_at.isoformat(),
            "max_extension_days": assignment.max_extension_days,
        }

    def _warn(self, request_id: Optional[str], message: str) -> None:
        payload = {"context": "pipeline", "message": message}
        if request_id is not None:
            payload["request_id"] = request_id
        self.log.append(EventKind.WARNING, payload, at=self._now())

    def _history(self, sid: str, exclude_request_id: str) -> list[HistoryEntry]:
        entries = []
        for request in self.log.snapshot.requests_for_student(sid):
            if request.id == exclude_request_id or request.status in _HISTORY_EXCLUDED:
                continue
            days = request.granted_days if request.granted_days > 0 else request.days_requested
            entries.append(
                HistoryEntry(
                    assignment=request.assignment,
                    days=days,
                    status=request.status,
                    submitted_at=request.submitted_at,
                )
            )
        entries.sort(key=lambda e: e.submitted_at)
        return entries

    def _mirror_partner(self, request: ExtensionRequest, decision) -> Optional[str]:
        snapshot = self.log.snapshot

        def known_student(sid: str) -> Optional[Student]:
            return snapshot.students.get(sid)

        try:
            mirror = mirror_for_partner(request, decision, known_student)
        except PartnerUnknown as exc:
            self._warn(request.id, f"partner not mirrored: {exc}")
            return None
        if mirror is None:
            return None
        if mirror.idempotency_key in snapshot.key_to_request:
            self._warn(request.id, f"partner mirror {mirror.id} already exists; skipped")
            return None
        partner = snapshot.students[str(mirror.student)]
        self.log.append(
            EventKind.PARTNER_MIRRORED,
            {
                "request_id": mirror.id,
                "sid": str(mirror.student),
                "name": partner.name,
                "email": partner.email,
                "assignment": self._assignment_payload(self.catalog[mirror.assignment]),
                "days_requested": mirror.days_requested,
                "reason": "",
                "submitted_at": mirror.submitted_at.isoformat(),
                "idempotency_key": mirror.idempotency_key,
                "dsp_registered": None,
                "partner": None,
                "origin_request_id": request.id,
            },
            at=self._now(),
        )
        # The mirror inherits the origin's outcome verbatim; rule_fired
        # records that it came from mirroring, not a fresh evaluation.
        self.log.append(
            EventKind.DECISION_MADE,
            {
                "request_id": mirror.id,
                "outcome": decision.outcome.value,
                "granted_days": decision.granted_days,
                "rule_fired": RULE_PARTNER_MIRROR,
            },
            actor=POLICY_ACTOR,
            at=self._now(),
        )
        self.notifier.enqueue_for_decision(self.log.snapshot.requests[mirror.id], at=self._now())
        return mirror.id

    # -- ingestion -----------------------------------------------------

    def ingest_csv_bytes(self, data: bytes) -> IngestReport:
        def sink(bundle: list[tuple[SubmissionDraft, Assignment]]):
            accepted, duplicates, ids = 0, 0, []
            for draft, assignment in bundle:
                outcome = self.submit(draft, assignment)
                if outcome.duplicate:
                    duplicates += 1
                else:
                    accepted += 1
                    ids.append(outcome.request_id)
            return accepted, duplicates, ids

        return ingest_csv(
            data,
            self.config.field_mapping,
            self.config.catalog,
            sink,
            self.config.hard_cap_days,
        )

    def submit_json(self, payload: dict) -> list[SubmitOutcome]:
        """API submission: may fan out to several assignments."""
        drafts = parse_json_submission(payload, self._now(), self.config.hard_cap_days)
        bundle = [
            (draft, match_assignment(draft.assignment_answer, self.config.catalog))
            for draft in drafts
        ]
        return [self.submit(draft, assignment) for draft, assignment in bundle]

    # -- staff decisions -----------------------------------------------

    def decide(self, request_id: str, action: str, staff_id: str, note: str = "") -> ExtensionRequest:
        """Resolve one pending-review request; approve also pushes to the
        LMS right away (failures fall back to the retry cycle)."""
        if action not in ("approve", "deny"):
            raise ValueError(f"action must be approve or deny, got {action!r}")
        snapshot = self.log.snapshot
        request = snapshot.requests.get(request_id)
        if request is None:
            raise UnknownRequest(request_id)
        locks = self._locks_for({str(request.student)})
        for lock in locks:
            lock.acquire()
        try:
            request = self.log.snapshot.requests[request_id]
            if request.status is not RequestStatus.PENDING_REVIEW:
                raise AlreadyDecided(
                    request_id, request_status_label(request.status, request.decided_by)
                )
            deny_by_hand = action == "deny" and self.config.policy.manual_denials
            self.log.append(
                EventKind.STAFF_DECISION,
                {
                    "request_id": request_id,
                    "action": action,
                    "staff_id": staff_id,
                    "granted_days": request.days_requested if action == "approve" else 0,
                    "note": note,
                    "ack_disposition": "manual" if deny_by_hand else "in_queue",
                },
                actor=staff_id,
                at=self._now(),
            )
            request = self.log.snapshot.requests[request_id]
            self.notifier.enqueue_for_decision(request, at=self._now())
            if action == "approve":
                self._apply_to_lms(request)
            return self.log.snapshot.requests[request_id]
        finally:
            for lock in reversed(locks):
                lock.release()

    # -- background work -----------------------------------------------

    def _apply_to_lms(self, request: ExtensionRequest) -> str:
        assignment = self.log.snapshot.assignments[request.assignment]
        new_due = compute_new_due_date(assignment.due_at, request.granted_days)
        return apply_extension(
            self.log,
            self.connector,
            request,
            new_due,
            self._now(),
            max_attempts=LMS_MAX_ATTEMPTS,
        )

    def _lms_due(self, now: datetime) -> list[ExtensionRequest]:
        due = []
        for request in self.log.snapshot.requests.values():
            if request.status in (RequestStatus.AUTO_APPROVED, RequestStatus.MANUAL_APPROVED):
                due.append(request)
            elif (
                request.status is RequestStatus.APPLY_FAILED
                and request.next_lms_attempt_at is not None
                and request.next_lms_attempt_at <= now
            ):
                due.append(request)
        return sorted(due, key=lambda r: r.id)

    def dispatch_cycle(self, now: Optional[datetime] = None) -> dict:
        """One pass of deferred work: deliver due email, push approved
        extensions."""
        with self._dispatch_lock:
            now = now or self._now()
            outbox = self.notifier.dispatch_outbox(self.sender, now)
            lms = {"applied": 0, "retry": 0, "failed": 0}
            for request in self._lms_due(now):
                result = self._apply_to_lms(request)
                lms[result if result in lms else "failed"] += 1
            return {"outbox": outbox, "lms": lms}

    def reconcile(self):
        return reconcile(self.connector, self.log.snapshot)

    # -- queries -------------------------------------------------------

    def pending_requests(self) -> list[ExtensionRequest]:
        return sorted(
            (
                r
                for r in self.log.snapshot.requests.values()
                if r.status is RequestStatus.PENDING_REVIEW
            ),
            key=lambda r: (r.submitted_at, r.id),
        )

    def history_summary(self, sid: str, exclude_request_id: str) -> dict:
        entries = self._history(sid, exclude_request_id)
        return {
            "prior_requests": len(entries),
            "cumulative_days": sum(e.days for e in entries),
        }

    def close(self) -> None:
        self.log.close()
