"""Decision emails: templates, the outbox queue, and dispatch.

Every decision produces exactly one email job per (request, template)
pair; the deterministic job id makes enqueue idempotent.  Jobs move
through the email state machine recorded in the event log, and dispatch
delivers through a pluggable sender.  Delivery is attempted before the
Sent event is appended, so a crash between the two re-attempts on the
next cycle; senders that deduplicate by job id keep that at most once.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from email.message import EmailMessage
from email.utils import format_datetime
from pathlib import Path
from typing import Optional, Protocol

from .model import (
    EmailJob,
    EmailStatus,
    ExtensionRequest,
    RequestStatus,
    email_job_id,
)
from .policy import compute_new_due_date
from .store import EventKind, EventLog

BACKOFF_BASE_SECONDS = 30
BACKOFF_FACTOR = 4
DEFAULT_MAX_ATTEMPTS = 5

TEMPLATE_KEYS = ("auto_approved", "manual_approved", "denied", "pending_ack")

#: Job states the dispatcher will attempt; Manual and PendingApproval
#: wait on a human, Sent and Failed are done.
DISPATCHABLE = (EmailStatus.AUTOMATIC, EmailStatus.IN_QUEUE)


class UnboundVariable(Exception):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"template references {{{{{name}}}}} but no binding was given")


class SendFailed(Exception):
    """A sender could not deliver; the job stays queued for retry."""


@dataclass(frozen=True)
class EmailTemplate:
    key: str
    subject: str
    body: str


_PLACEHOLDER = re.compile(r"\{\{\s*(\w+)\s*\}\}")


def _substitute(text: str, bindings: dict) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundVariable(name)
        return str(bindings[name])

    return _PLACEHOLDER.sub(repl, text)


def render_template(template: EmailTemplate, bindings: dict) -> tuple[str, str]:
    """Fill {{name}} placeholders; unused bindings are fine, unknown
    placeholders are not."""
    return _substitute(template.subject, bindings), _substitute(template.body, bindings)


DEFAULT_TEMPLATES: dict[str, EmailTemplate] = {
    "auto_approved": EmailTemplate(
        key="auto_approved",
        subject="Extension approved: {{assignment_name}}",
        body=(
            "Hi {{student_name}},\n"
            "\n"
            "Your extension request for {{assignment_name}} was approved\n"
            "automatically. You have {{days}} extra day(s); the new due date\n"
            "is {{new_due_at}}.\n"
            "\n"
            "{{course_name}} course staff\n"
        ),
    ),
    "manual_approved": EmailTemplate(
        key="manual_approved",
        subject="Extension approved: {{assignment_name}}",
        body=(
            "Hi {{student_name}},\n"
            "\n"
            "Course staff reviewed your extension request for\n"
            "{{assignment_name}} and approved it. You have {{days}} extra\n"
            "day(s); the new due date is {{new_due_at}}.\n"
            "\n"
            "{{course_name}} course staff\n"
        ),
    ),
    "denied": EmailTemplate(
        key="denied",
        subject="Extension request update: {{assignment_name}}",
        body=(
            "Hi {{student_name}},\n"
            "\n"
            "Your request for {{days}} extra day(s) on {{assignment_name}}\n"
            "could not be approved. Please reach out to course staff if you\n"
            "would like to discuss it.\n"
            "\n"
            "{{course_name}} course staff\n"
        ),
    ),
    "pending_ack": EmailTemplate(
        key="pending_ack",
        subject="Extension request received: {{assignment_name}}",
        body=(
            "Hi {{student_name}},\n"
            "\n"
            "We received your request for {{days}} extra day(s) on\n"
            "{{assignment_name}}. It needs a quick look from course staff;\n"
            "you will get another email as soon as it is decided.\n"
            "\n"
            "{{course_name}} course staff\n"
        ),
    ),
}


def load_templates(directory: Optional[Path] = None) -> dict[str, EmailTemplate]:
    """Read per-key template files; keys without a file keep the default.

    File format: ``<key>.txt``, first line is the subject, the rest is
    the body.
    """
    templates = dict(DEFAULT_TEMPLATES)
    if directory is None:
        return templates
    for key in TEMPLATE_KEYS:
        path = Path(directory) / f"{key}.txt"
        if not path.exists():
            continue
        raw = path.read_text(encoding="utf-8")
        subject, _, body = raw.partition("\n")
        templates[key] = EmailTemplate(key=key, subject=subject.strip(), body=body)
    return templates


def write_default_templates(directory: Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key in TEMPLATE_KEYS:
        template = DEFAULT_TEMPLATES[key]
        path = directory / f"{key}.txt"
        path.write_text(f"{template.subject}\n{template.body}", encoding="utf-8")
        written.append(path)
    return written


class Sender(Protocol):
    def send(self, job: EmailJob, now: datetime) -> str:
        """Deliver one job; returns a message id or raises SendFailed."""
        ...


class EmlFileSender:
    """Writes each job as an .eml file named after the job id.

    A file that already exists counts as delivered, which makes delivery
    idempotent per job id even if the Sent event was lost in a crash.
    """

    def __init__(self, outbox_dir: Path, from_addr: str, domain: str = "flextend.local"):
        self.outbox_dir = Path(outbox_dir)
        self.from_addr = from_addr
        self.domain = domain
        self.outbox_dir.mkdir(parents=True, exist_ok=True)

    def message_id(self, job: EmailJob) -> str:
        return f"<{job.id}@{self.domain}>"

    def send(self, job: EmailJob, now: datetime) -> str:
        path = self.outbox_dir / f"{job.id}.eml"
        if path.exists():
            return self.message_id(job)
        message = EmailMessage()
        message["To"] = job.to
        message["From"] = self.from_addr
        message["Subject"] = job.subject
        message["Date"] = format_datetime(now)
        message["Message-ID"] = self.message_id(job)
        message.set_content(job.body)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(bytes(message))
        tmp.rename(path)
        return self.message_id(job)


class MemorySender:
    """Records deliveries; optionally fails for chosen job ids."""

    def __init__(self, fail_ids: Optional[set[str]] = None):
        self.delivered: list[EmailJob] = []
        self.fail_ids = fail_ids or set()

    def send(self, job: EmailJob, now: datetime) -> str:
        if job.id in self.fail_ids:
            raise SendFailed(f"refused {job.id}")
        self.delivered.append(job)
        return f"<{job.id}@memory>"


class FaultInjectingSender:
    """Random failures plus a ledger proving at-most-once delivery."""

    def __init__(self, rng, failure_rate: float):
        self.rng = rng
        self.failure_rate = failure_rate
        self.deliveries: dict[str, int] = {}

    def send(self, job: EmailJob, now: datetime) -> str:
        if job.id in self.deliveries:
            # Already delivered once; a retried send dedupes by job id.
            return f"<{job.id}@fault>"
        if self.rng.random() < self.failure_rate:
            raise SendFailed("injected transport failure")
        self.deliveries[job.id] = self.deliveries.get(job.id, 0) + 1
        return f"<{job.id}@fault>"


_STATUS_TO_TEMPLATE = {
    RequestStatus.AUTO_APPROVED: "auto_approved",
    RequestStatus.PENDING_REVIEW: "pending_ack",
    RequestStatus.MANUAL_APPROVED: "manual_approved",
    RequestStatus.MANUAL_DENIED: "denied",
}


class Notifier:
    """Queue manager bound to one event log."""

    def __init__(
        self,
        log: EventLog,
        templates: Optional[dict[str, EmailTemplate]] = None,
        course_name: str = "Course",
        from_addr: str = "extensions@flextend.local",
        manual_denials: bool = False,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    ):
        self.log = log
        self.templates = templates if templates is not None else dict(DEFAULT_TEMPLATES)
        self.course_name = course_name
        self.from_addr = from_addr
        self.manual_denials = manual_denials
        self.max_attempts = max_attempts

    def _initial_status(self, request: ExtensionRequest) -> EmailStatus:
        if request.status is RequestStatus.AUTO_APPROVED:
            return EmailStatus.AUTOMATIC
        if request.status is RequestStatus.PENDING_REVIEW:
            return EmailStatus.PENDING_APPROVAL
        if request.status is RequestStatus.MANUAL_DENIED and self.manual_denials:
            return EmailStatus.MANUAL
        return EmailStatus.IN_QUEUE

    def _bindings(self, request: ExtensionRequest) -> dict:
        snapshot = self.log.snapshot
        student = snapshot.students[str(request.student)]
        assignment = snapshot.assignments[request.assignment]
        days = request.granted_days if request.granted_days > 0 else request.days_requested
        if request.granted_days > 0:
            new_due = compute_new_due_date(assignment.due_at, request.granted_days)
        else:
            new_due = assignment.due_at
        return {
            "student_name": student.name,
            "assignment_name": assignment.display_name,
            "days": days,
            "new_due_at": new_due.astimezone(timezone.utc).strftime("%Y-%m-%d %H:%M UTC"),
            "reason_echo": request.reason,
            "course_name": self.course_name,
        }

    def enqueue_for_decision(
        self, request: ExtensionRequest, at: Optional[datetime] = None
    ) -> EmailJob:
        """Queue the one email this decision owes the student.

        Raises DuplicateJob (from the store) when the (request, template)
        pair already has a job, and KeyError for undecided requests.
        """
        template_key = _STATUS_TO_TEMPLATE[request.status]
        template = self.templates[template_key]
        subject, body = render_template(template, self._bindings(request))
        student = self.log.snapshot.students[str(request.student)]
        job_id = email_job_id(request.id, template_key)
        self.log.append(
            EventKind.EMAIL_QUEUED,
            {
                "job_id": job_id,
                "request_id": request.id,
                "template_key": template_key,
                "to": student.email,
                "subject": subject,
                "body": body,
                "status": self._initial_status(request).value,
            },
            at=at,
        )
        return self.log.snapshot.email_jobs[job_id]

    def due_jobs(self, now: datetime) -> list[EmailJob]:
        return [
            job
            for job in self.log.snapshot.email_jobs.values()
            if job.status in DISPATCHABLE
            and (job.next_attempt_at is None or job.next_attempt_at <= now)
        ]

    def dispatch_outbox(self, sender: Sender, now: datetime) -> dict[str, int]:
        """One delivery cycle: try every due job exactly once.

        Failures never abort the cycle.  A failed attempt schedules the
        next one at now + 30 s * 4^(attempts-1); after max_attempts the
        job lands in Failed and waits for an operator requeue.
        """
        report = {"sent": 0, "retried": 0, "failed": 0}
        for job in sorted(self.due_jobs(now), key=lambda j: j.id):
            try:
                message_id = sender.send(job, now)
            except Exception as exc:
                attempts_after = job.attempts + 1
                if attempts_after >= self.max_attempts:
                    self.log.append(
                        EventKind.EMAIL_FAILED,
                        {"job_id": job.id, "error": str(exc), "terminal": True},
                        at=now,
                    )
                    report["failed"] += 1
                else:
                    delay = BACKOFF_BASE_SECONDS * BACKOFF_FACTOR ** (attempts_after - 1)
                    self.log.append(
                        EventKind.EMAIL_FAILED,
                        {
                            "job_id": job.id,
                            "error": str(exc),
                            "terminal": False,
                            "next_attempt_at": (now + timedelta(seconds=delay)).isoformat(),
                        },
                        at=now,
                    )
                    report["retried"] += 1
            else:
                self.log.append(
                    EventKind.EMAIL_SENT,
                    {"job_id": job.id, "message_id": message_id},
                    at=now,
                )
                report["sent"] += 1
        return report

    def requeue(self, job_id: str, actor: str) -> EmailJob:
        """Operator override: put a Failed job back in the queue."""
        self.log.append(
            EventKind.EMAIL_QUEUED, {"job_id": job_id, "requeue": True}, actor=actor
        )
        return self.log.snapshot.email_jobs[job_id]
