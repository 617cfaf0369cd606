"""Template rendering, queue mapping, dispatch, and fault tolerance."""

import random
from datetime import datetime, timedelta, timezone
from email import message_from_bytes

import pytest

from flextend.model import EmailStatus, RequestStatus, email_job_id
from flextend.notifier import (
    BACKOFF_BASE_SECONDS,
    BACKOFF_FACTOR,
    DEFAULT_TEMPLATES,
    TEMPLATE_KEYS,
    EmailTemplate,
    EmlFileSender,
    FaultInjectingSender,
    MemorySender,
    Notifier,
    UnboundVariable,
    load_templates,
    render_template,
    write_default_templates,
)
from flextend.store import DuplicateJob, EventKind, EventLog

from test_store import decide, received_payload

NOW = datetime(2026, 2, 2, 10, 0, tzinfo=timezone.utc)

ALL_BINDINGS = {
    "student_name": "Alex",
    "assignment_name": "HW1",
    "days": 3,
    "new_due_at": "2026-02-04 23:59 UTC",
    "reason_echo": "travel",
    "course_name": "CS 61X",
}


class TestRendering:
    def test_substitution(self):
        template = EmailTemplate(
            key="x", subject="On {{assignment_name}}", body="Extension of {{days}} days on {{assignment_name}}"
        )
        subject, body = render_template(template, {"assignment_name": "HW1", "days": 3})
        assert subject == "On HW1"
        assert body == "Extension of 3 days on HW1"

    def test_unknown_placeholder_is_an_error(self):
        template = EmailTemplate(key="x", subject="s", body="hello {{foo}}")
        with pytest.raises(UnboundVariable) as exc:
            render_template(template, {"bar": 1})
        assert exc.value.name == "foo"

    def test_unused_bindings_are_ignored(self):
        template = EmailTemplate(key="x", subject="s", body="plain")
        assert render_template(template, ALL_BINDINGS) == ("s", "plain")

    def test_whitespace_inside_braces_is_tolerated(self):
        template = EmailTemplate(key="x", subject="s", body="{{ days }}!")
        assert render_template(template, {"days": 2})[1] == "2!"

    @pytest.mark.parametrize("key", TEMPLATE_KEYS)
    def test_default_templates_render_clean(self, key):
        subject, body = render_template(DEFAULT_TEMPLATES[key], ALL_BINDINGS)
        assert "{{" not in subject + body

    @pytest.mark.parametrize("key", TEMPLATE_KEYS)
    def test_default_bodies_are_injective_in_days(self, key):
        bodies = set()
        for days in range(1, 31):
            bindings = dict(ALL_BINDINGS, days=days)
            bodies.add(render_template(DEFAULT_TEMPLATES[key], bindings)[1])
        assert len(bodies) == 30

    @pytest.mark.parametrize("key", TEMPLATE_KEYS)
    def test_default_bodies_do_not_echo_the_reason(self, key):
        bindings = dict(ALL_BINDINGS, reason_echo="SENTINEL-REASON")
        subject, body = render_template(DEFAULT_TEMPLATES[key], bindings)
        assert "SENTINEL-REASON" not in subject + body


class TestTemplateFiles:
    def test_round_trip_through_a_directory(self, tmp_path):
        write_default_templates(tmp_path)
        loaded = load_templates(tmp_path)
        assert loaded == DEFAULT_TEMPLATES

    def test_partial_override_keeps_other_defaults(self, tmp_path):
        (tmp_path / "denied.txt").write_text(
            "Sorry about {{assignment_name}}\nNo dice: {{days}} days.", encoding="utf-8"
        )
        loaded = load_templates(tmp_path)
        assert loaded["denied"].subject == "Sorry about {{assignment_name}}"
        assert loaded["auto_approved"] == DEFAULT_TEMPLATES["auto_approved"]


def make_decided_request(log, outcome="automatic", sid="123456", days=2):
    payload = received_payload(sid=sid, days=days)
    rid = payload["request_id"]
    log.append(EventKind.REQUEST_RECEIVED, payload)
    if outcome == "automatic":
        decide(log, rid, "automatic", granted=days, rule="all_auto_rules_passed")
    elif outcome == "pending":
        decide(log, rid, "pending_approval")
    elif outcome == "deny":
        decide(log, rid, "deny", rule="ineligible_assignment")
    return log.snapshot.requests[rid]


class TestEnqueue:
    def test_auto_approval_maps_to_automatic_status(self):
        log = EventLog()
        notifier = Notifier(log)
        request = make_decided_request(log, "automatic")
        job = notifier.enqueue_for_decision(request)
        assert job.status is EmailStatus.AUTOMATIC
        assert job.template_key == "auto_approved"
        assert job.to == "s123456@example.edu"
        assert "2 extra day(s)" in job.body

    def test_escalation_maps_to_pending_ack(self):
        log = EventLog()
        notifier = Notifier(log)
        request = make_decided_request(log, "pending")
        job = notifier.enqueue_for_decision(request)
        assert job.status is EmailStatus.PENDING_APPROVAL
        assert job.template_key == "pending_ack"

    def test_denial_maps_to_in_queue_by_default(self):
        log = EventLog()
        notifier = Notifier(log)
        request = make_decided_request(log, "deny")
        job = notifier.enqueue_for_decision(request)
        assert job.status is EmailStatus.IN_QUEUE
        assert job.template_key == "denied"

    def test_manual_denials_config_routes_denials_to_manual(self):
        log = EventLog()
        notifier = Notifier(log, manual_denials=True)
        request = make_decided_request(log, "deny")
        job = notifier.enqueue_for_decision(request)
        assert job.status is EmailStatus.MANUAL

    def test_second_enqueue_is_a_duplicate_and_changes_nothing(self):
        log = EventLog()
        notifier = Notifier(log)
        request = make_decided_request(log, "automatic")
        notifier.enqueue_for_decision(request)
        before = log.snapshot.canonical_bytes()
        with pytest.raises(DuplicateJob):
            notifier.enqueue_for_decision(request)
        assert log.snapshot.canonical_bytes() == before

    def test_one_job_per_decision_over_a_random_batch(self):
        rng = random.Random(13)
        log = EventLog()
        notifier = Notifier(log)
        decisions = 0
        for i in range(60):
            request = make_decided_request(
                log, rng.choice(["automatic", "pending", "deny"]), sid=str(200000 + i)
            )
            notifier.enqueue_for_decision(request)
            decisions += 1
        assert len(log.snapshot.email_jobs) == decisions


class TestDispatch:
    def _queued_job(self, log, notifier, outcome="automatic", sid="123456"):
        request = make_decided_request(log, outcome, sid=sid)
        return notifier.enqueue_for_decision(request)

    def test_happy_path_sends_and_reports(self):
        log = EventLog()
        notifier = Notifier(log)
        job = self._queued_job(log, notifier)
        sender = MemorySender()
        report = notifier.dispatch_outbox(sender, NOW)
        assert report == {"sent": 1, "retried": 0, "failed": 0}
        assert log.snapshot.email_jobs[job.id].status is EmailStatus.SENT
        assert [j.id for j in sender.delivered] == [job.id]

    def test_pending_approval_jobs_are_not_dispatched(self):
        log = EventLog()
        notifier = Notifier(log)
        job = self._queued_job(log, notifier, outcome="pending")
        report = notifier.dispatch_outbox(MemorySender(), NOW)
        assert report == {"sent": 0, "retried": 0, "failed": 0}
        assert log.snapshot.email_jobs[job.id].status is EmailStatus.PENDING_APPROVAL

    def test_failure_schedules_exponential_backoff(self):
        log = EventLog()
        notifier = Notifier(log)
        job = self._queued_job(log, notifier)
        sender = MemorySender(fail_ids={job.id})
        notifier.dispatch_outbox(sender, NOW)
        state = log.snapshot.email_jobs[job.id]
        assert state.attempts == 1
        assert state.next_attempt_at == NOW + timedelta(seconds=BACKOFF_BASE_SECONDS)
        # Not due yet: a cycle before the backoff expires skips the job.
        notifier.dispatch_outbox(sender, NOW + timedelta(seconds=5))
        assert log.snapshot.email_jobs[job.id].attempts == 1
        notifier.dispatch_outbox(sender, NOW + timedelta(seconds=31))
        state = log.snapshot.email_jobs[job.id]
        assert state.attempts == 2
        expected = NOW + timedelta(seconds=31 + BACKOFF_BASE_SECONDS * BACKOFF_FACTOR)
        assert state.next_attempt_at == expected

    def test_max_attempts_two_fails_after_two(self):
        log = EventLog()
        notifier = Notifier(log, max_attempts=2)
        job = self._queued_job(log, notifier)
        sender = MemorySender(fail_ids={job.id})
        now = NOW
        notifier.dispatch_outbox(sender, now)
        assert log.snapshot.email_jobs[job.id].status in (EmailStatus.AUTOMATIC,)
        now += timedelta(seconds=BACKOFF_BASE_SECONDS)
        report = notifier.dispatch_outbox(sender, now)
        assert report["failed"] == 1
        assert log.snapshot.email_jobs[job.id].status is EmailStatus.FAILED

    def test_one_bad_job_never_aborts_the_cycle(self):
        log = EventLog()
        notifier = Notifier(log)
        bad = self._queued_job(log, notifier, sid="111111")
        good = self._queued_job(log, notifier, sid="222222")
        sender = MemorySender(fail_ids={bad.id})
        report = notifier.dispatch_outbox(sender, NOW)
        assert report == {"sent": 1, "retried": 1, "failed": 0}
        assert log.snapshot.email_jobs[good.id].status is EmailStatus.SENT

    def test_requeued_job_gets_a_fresh_attempt_budget(self):
        log = EventLog()
        notifier = Notifier(log, max_attempts=2)
        job = self._queued_job(log, notifier)
        sender = MemorySender(fail_ids={job.id})
        now = NOW
        notifier.dispatch_outbox(sender, now)
        now += timedelta(seconds=BACKOFF_BASE_SECONDS)
        notifier.dispatch_outbox(sender, now)
        assert log.snapshot.email_jobs[job.id].status is EmailStatus.FAILED
        notifier.requeue(job.id, actor="ta-1")
        sender.fail_ids.clear()
        report = notifier.dispatch_outbox(sender, now + timedelta(seconds=1))
        assert report["sent"] == 1
        assert log.snapshot.email_jobs[job.id].status is EmailStatus.SENT


class TestFaultInjection:
    def test_every_job_terminates_and_none_delivers_twice(self):
        rng = random.Random(2026)
        log = EventLog()
        notifier = Notifier(log)
        for i in range(40):
            request = make_decided_request(
                log, rng.choice(["automatic", "deny"]), sid=str(300000 + i)
            )
            notifier.enqueue_for_decision(request)
        sender = FaultInjectingSender(rng, failure_rate=0.3)
        now = NOW
        # Enough cycles to exhaust the longest backoff chain.
        for _ in range(12):
            notifier.dispatch_outbox(sender, now)
            now += timedelta(seconds=BACKOFF_BASE_SECONDS * BACKOFF_FACTOR**4)
        statuses = {j.status for j in log.snapshot.email_jobs.values()}
        assert statuses <= {EmailStatus.SENT, EmailStatus.FAILED}
        assert all(count == 1 for count in sender.deliveries.values())
        sent = [j for j in log.snapshot.email_jobs.values() if j.status is EmailStatus.SENT]
        assert {j.id for j in sent} == set(sender.deliveries)


class TestEmlSender:
    def test_writes_parseable_eml_named_after_the_job(self, tmp_path):
        log = EventLog()
        notifier = Notifier(log, course_name="CS 61X")
        request = make_decided_request(log, "automatic")
        job = notifier.enqueue_for_decision(request)
        sender = EmlFileSender(tmp_path, from_addr="staff@example.edu")
        notifier.dispatch_outbox(sender, NOW)
        path = tmp_path / f"{job.id}.eml"
        assert path.exists()
        message = message_from_bytes(path.read_bytes())
        assert message["To"] == "s123456@example.edu"
        assert message["From"] == "staff@example.edu"
        assert message["Message-ID"] == f"<{job.id}@flextend.local>"
        assert "CS 61X course staff" in message.get_payload()

    def test_existing_file_short_circuits_as_delivered(self, tmp_path):
        log = EventLog()
        notifier = Notifier(log)
        request = make_decided_request(log, "automatic")
        job = notifier.enqueue_for_decision(request)
        sender = EmlFileSender(tmp_path, from_addr="staff@example.edu")
        sender.send(job, NOW)
        stamp = (tmp_path / f"{job.id}.eml").stat().st_mtime_ns
        sender.send(job, NOW + timedelta(hours=1))
        assert (tmp_path / f"{job.id}.eml").stat().st_mtime_ns == stamp
