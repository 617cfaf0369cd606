"""Acceptance gate: the seven shipping criteria, one test per criterion.

Each test prints one PASS line with its headline numbers, so a verbose
run doubles as a release checklist.  Every check compares the engine
against an independent oracle or ledger rather than against itself.
"""

import csv
import io
import itertools
import json
import random
import time
from datetime import datetime, timedelta, timezone

from fastapi.testclient import TestClient

from flextend.lms import LmsExtension, MockConnector
from flextend.model import (
    EmailAction,
    EmailStatus,
    ExtensionRequest,
    IllegalTransition,
    RequestAction,
    RequestStatus,
    Student,
    StudentId,
    TERMINAL_REQUEST_STATES,
    ViewerRole,
    email_successors,
    make_idempotency_key,
    request_id_for_key,
    request_successors,
    transition_email,
    transition_request,
)
from flextend.notifier import FaultInjectingSender, MemorySender
from flextend.pipeline import ExtensionService
from flextend.policy import AssignmentOverride, HistoryEntry, PolicyConfig, evaluate
from flextend.report import write_report
from flextend.roster import export_roster_csv, project_roster
from flextend.service import create_app
from flextend.store import EventLog, Snapshot, apply_event, iter_events

from eventgen import StreamBuilder
from policy_oracle import oracle_decide
from test_pipeline import FakeClock, draft, make_config, make_service, submit

T0 = datetime(2025, 3, 1, 12, 0, tzinfo=timezone.utc)


def _passed(line: str) -> None:
    print(f"PASS {line}")


# -- criterion 1: policy oracle equivalence ----------------------------


def _grid_histories():
    """Every multiset of up to four prior approved extensions."""
    symbols = [(a, d) for a in ("hw1", "hw2") for d in range(1, 9)]
    earlier = T0 - timedelta(days=9)
    for k in range(0, 5):
        for combo in itertools.combinations_with_replacement(symbols, k):
            engine = [
                HistoryEntry(a, d, RequestStatus.AUTO_APPROVED, earlier) for a, d in combo
            ]
            oracle = [(a, d, "auto_approved", earlier) for a, d in combo]
            yield engine, oracle


_CONFIG_POINTS = [
    PolicyConfig(),
    PolicyConfig(
        auto_max_days_per_request=1,
        auto_max_cumulative_days=2,
        dsp_auto_max_days_per_request=1,
        escalate_after_n_requests=2,
    ),
    PolicyConfig(
        auto_max_days_per_request=8,
        auto_max_cumulative_days=9,
        dsp_auto_max_days_per_request=8,
        escalate_after_n_requests=5,
    ),
    PolicyConfig(
        auto_max_days_per_request=2,
        auto_max_cumulative_days=6,
        dsp_auto_max_days_per_request=8,
        escalate_after_n_requests=3,
    ),
    PolicyConfig(
        escalate_after_n_requests=4,
        assignment_overrides={"hw1": AssignmentOverride(ineligible=True)},
    ),
    PolicyConfig(
        auto_max_days_per_request=5,
        auto_max_cumulative_days=9,
        dsp_auto_max_days_per_request=6,
        assignment_overrides={"hw2": AssignmentOverride(max_days=2)},
    ),
    PolicyConfig(request_window=(T0 - timedelta(days=5), T0 + timedelta(days=5))),
    PolicyConfig(request_window=(T0 + timedelta(days=1), T0 + timedelta(days=2))),
]


def _bare_request(assignment: str, days: int) -> ExtensionRequest:
    key = make_idempotency_key("30345", assignment, T0)
    return ExtensionRequest(
        id=request_id_for_key(key),
        student=StudentId("30345"),
        assignment=assignment,
        days_requested=days,
        reason="",
        submitted_at=T0,
        idempotency_key=key,
    )


def test_policy_oracle_equivalence():
    requests = {
        (a, d): _bare_request(a, d) for a in ("hw1", "hw2") for d in range(1, 9)
    }
    students = {
        dsp: Student(StudentId("30345"), "A", "a@b.edu", dsp_registered=dsp)
        for dsp in (False, True)
    }
    histories = list(_grid_histories())

    start = time.perf_counter()
    compared = 0
    for config in _CONFIG_POINTS:
        overrides = {
            slug: ("ineligible", None) if o.ineligible else ("max_days", o.max_days)
            for slug, o in config.assignment_overrides.items()
        }
        for engine_hist, oracle_hist in histories:
            for (assignment, days), request in requests.items():
                for dsp, student in students.items():
                    got = evaluate(request, engine_hist, student, config)
                    want = oracle_decide(
                        days,
                        assignment,
                        T0,
                        oracle_hist,
                        dsp,
                        config.auto_max_days_per_request,
                        config.auto_max_cumulative_days,
                        config.dsp_auto_max_days_per_request,
                        config.escalate_after_n_requests,
                        overrides,
                        config.request_window,
                    )
                    assert (got.outcome.value, got.granted_days, got.rule_fired) == want, (
                        config,
                        engine_hist,
                        assignment,
                        days,
                        dsp,
                    )
                    compared += 1
    elapsed = time.perf_counter() - start

    # Order of history must never matter; spot-check with shuffles.
    rng = random.Random(11)
    for _ in range(500):
        engine_hist, _ = histories[rng.randrange(len(histories))]
        shuffled = engine_hist[:]
        rng.shuffle(shuffled)
        request = requests[(rng.choice(("hw1", "hw2")), rng.randint(1, 8))]
        config = rng.choice(_CONFIG_POINTS)
        assert evaluate(request, engine_hist, students[False], config) == evaluate(
            request, shuffled, students[False], config
        )

    assert elapsed < 60, f"grid took {elapsed:.1f}s"
    _passed(
        f"policy oracle equivalence: {compared} grid comparisons, "
        f"100% agreement in {elapsed:.1f}s"
    )


# -- criterion 2: state-machine soundness ------------------------------


def test_state_machine_soundness():
    rng = random.Random(2024)
    request_states = list(RequestStatus)
    email_states = list(EmailStatus)
    request_actions = list(RequestAction)
    email_actions = list(EmailAction)

    sequences = 0
    steps = 0
    for _ in range(10_000):
        sequences += 1
        if rng.random() < 0.5:
            state = rng.choice(request_states)
            for _ in range(rng.randint(1, 12)):
                action = rng.choice(request_actions)
                resume = rng.choice(request_states + [None])
                before = state
                try:
                    state = transition_request(state, action, resume)
                except IllegalTransition:
                    state = before
                else:
                    assert state in request_successors(before) or state == before
                if before in TERMINAL_REQUEST_STATES:
                    assert state == before, "terminal request state moved"
                steps += 1
        else:
            state = rng.choice(email_states)
            for _ in range(rng.randint(1, 12)):
                action = rng.choice(email_actions)
                before = state
                try:
                    state = transition_email(state, action)
                except IllegalTransition:
                    state = before
                else:
                    assert state in email_successors(before) or state == before
                if before is EmailStatus.SENT:
                    assert state is EmailStatus.SENT, "SENT must absorb everything"
                if before is EmailStatus.FAILED and action is not EmailAction.REQUEUE:
                    assert state is EmailStatus.FAILED
                steps += 1

    # Whole-system streams: the store checks the request/email coherence
    # invariant after every event and raises if it is ever violated.
    events = 0
    for seed in range(20):
        log = EventLog()
        StreamBuilder(log, random.Random(3000 + seed)).run(250)
        events += log.snapshot.last_seq
        for job in log.snapshot.email_jobs.values():
            if job.status is EmailStatus.PENDING_APPROVAL:
                request = log.snapshot.requests[job.request_id]
                assert request.status is RequestStatus.PENDING_REVIEW

    _passed(
        f"state-machine soundness: {sequences} fuzzed sequences "
        f"({steps} steps), coherence held across {events} streamed events"
    )


# -- criterion 3: event-sourcing equivalence ---------------------------


def test_event_sourcing_equivalence():
    log = EventLog()
    builder = StreamBuilder(log, random.Random(77))
    live_states = []
    for _ in range(1000):
        builder.step()
        live_states.append(log.snapshot.canonical_bytes())
    assert log.snapshot.last_seq == 1000

    lines = [event.to_line() for event in log.events]
    snapshot = Snapshot()
    for k, event in enumerate(iter_events(lines), start=1):
        apply_event(snapshot, event)
        assert snapshot.canonical_bytes() == live_states[k - 1], f"diverged at event {k}"

    assert snapshot.canonical_bytes() == log.snapshot.canonical_bytes()
    _passed(
        "event-sourcing equivalence: 1000-event replay byte-identical, "
        "prefix-monotone at every k"
    )


# -- criterion 4: idempotency ------------------------------------------


def _random_form_csv(rng: random.Random, rows: int) -> bytes:
    from test_service import CSV_HEADER

    out = [CSV_HEADER]
    for i in range(rows):
        sid = str(910000 + rng.randrange(12))
        slug = rng.choice(["hw1", "hw2", "lab1"])
        days = rng.randint(1, 12)
        minute = i  # distinct timestamps keep rows distinct
        out.append(
            f"1/21/2026 10:{minute:02d}:00,s{sid}@example.edu,{sid},Student {sid},"
            f"{rng.choice(['Yes', 'No'])},{slug},{days},reason {i},No,"
        )
    return ("\n".join(out) + "\n").encode()


def test_idempotency():
    rng = random.Random(41)
    service, clock = make_service()

    data = _random_form_csv(rng, 40)
    first = service.ingest_csv_bytes(data)
    assert first.accepted > 0
    clock.advance(60)
    service.dispatch_cycle()
    before_state = service.log.snapshot.canonical_bytes()
    before_outbox = list(service.sender.delivered)

    again = service.ingest_csv_bytes(data)
    assert again.accepted == 0
    assert again.skipped_duplicates == first.accepted
    assert service.log.snapshot.canonical_bytes() == before_state
    assert service.sender.delivered == before_outbox

    payload = {"sid": "915000", "assignment": "hw1", "days": 2, "reason": "x",
               "submitted_at": "2026-02-02T10:00:00+00:00"}
    (posted,) = service.submit_json(payload)
    mid_state = service.log.snapshot.canonical_bytes()
    (reposted,) = service.submit_json(payload)
    assert reposted.duplicate and reposted.request_id == posted.request_id
    assert service.log.snapshot.canonical_bytes() == mid_state

    # Duplicate LMS upserts: one extension per (student, assignment).
    connector = MockConnector(["hw1"])
    extension = LmsExtension("dup@example.edu", "hw1", T0 + timedelta(days=3), "req-dup")
    for _ in range(5):
        connector.upsert_extension(extension)
    assert list(connector.list_extensions()) == [("dup@example.edu", "hw1")]
    assert connector.list_extensions()[("dup@example.edu", "hw1")] == T0 + timedelta(days=3)

    _passed(
        f"idempotency: CSV re-ingest ({first.accepted} rows) and JSON re-post "
        "left snapshot and outbox byte-identical; 5 duplicate upserts kept one extension"
    )


# -- criterion 5: synchronous decision, one-cycle delivery -------------


def test_pipeline_latency_proxy():
    service, _ = make_service()
    started = time.perf_counter()
    outcome = submit(service, draft(sid="920001", days=2))
    elapsed = time.perf_counter() - started
    assert outcome.status_label == "automatic"
    assert elapsed < 1.0, f"decision took {elapsed:.3f}s"

    report = service.dispatch_cycle()
    assert report["outbox"]["sent"] == 1
    assert report["lms"]["applied"] == 1
    request = service.log.snapshot.requests[outcome.request_id]
    (job,) = service.log.snapshot.jobs_for(outcome.request_id)
    assert request.status is RequestStatus.APPLIED
    assert job.status is EmailStatus.SENT
    _passed(
        f"pipeline latency: automatic label returned in {elapsed * 1000:.0f}ms, "
        "Sent + Applied within one dispatch cycle"
    )


# -- criterion 6: fault tolerance --------------------------------------


def test_fault_tolerance_under_30_percent_failures():
    config = make_config()
    sender = FaultInjectingSender(random.Random(6001), failure_rate=0.3)
    connector = MockConnector(
        [a.slug for a in config.assignments], rng=random.Random(6002), failure_rate=0.3
    )
    clock = FakeClock()
    service = ExtensionService(config, EventLog(), connector, sender=sender, clock=clock)

    rng = random.Random(6003)
    for i in range(60):
        sid = str(930000 + i % 25)
        submit(service, draft(sid=sid, days=rng.randint(1, 8), slug=rng.choice(["hw1", "hw2"])))
    for request in service.pending_requests():
        service.decide(request.id, rng.choice(["approve", "deny"]), staff_id="ta-1")

    # Worst-case backoff between attempts is 30 * 4^3 seconds for email
    # and 30 * 4^3 for the LMS; jump the clock far past both each cycle.
    cycles = 0
    max_attempts = config.email.max_attempts
    for _ in range(max_attempts + 1):
        clock.advance(10_000)
        service.dispatch_cycle()
        cycles += 1

    jobs = list(service.log.snapshot.email_jobs.values())
    assert jobs, "storm produced no email"
    for job in jobs:
        assert job.status in (EmailStatus.SENT, EmailStatus.FAILED), job
        assert job.attempts <= max_attempts
    sent_ids = {j.id for j in jobs if j.status is EmailStatus.SENT}
    assert set(sender.deliveries) == sent_ids
    assert all(count == 1 for count in sender.deliveries.values())

    requests = list(service.log.snapshot.requests.values())
    terminal = (RequestStatus.APPLIED, RequestStatus.APPLY_FAILED, RequestStatus.MANUAL_DENIED)
    expected_due: dict[tuple[str, str], datetime] = {}
    for request in requests:
        assert request.status in terminal, request
        if request.status is RequestStatus.APPLY_FAILED:
            assert request.lms_attempts == 5
            assert request.next_lms_attempt_at is None
        if request.status is RequestStatus.APPLIED:
            student = service.log.snapshot.students[str(request.student)]
            assignment = service.log.snapshot.assignments[request.assignment]
            key = (student.email, request.assignment)
            due = assignment.due_at + timedelta(days=request.granted_days)
            expected_due[key] = max(expected_due.get(key, due), due)

    extensions = connector.list_extensions()
    assert extensions == expected_due, "duplicate or drifted extensions in the LMS"

    failed_jobs = sum(1 for j in jobs if j.status is EmailStatus.FAILED)
    _passed(
        f"fault tolerance: {len(jobs)} jobs and {len(requests)} requests all "
        f"terminal within {cycles} cycles at 30% failures; "
        f"{len(sent_ids)} delivered exactly once, {failed_jobs} failed cleanly, "
        f"{len(extensions)} extensions with no duplicates"
    )


# -- criterion 7: privacy ----------------------------------------------


def _scan_clean(blob: str) -> bool:
    return "SENTINEL" not in blob and '"dsp": true' not in blob and '"dsp_registered": true' not in blob


def test_privacy_restricted_surfaces_never_leak():
    service = make_service()[0]
    app = create_app(service, run_timer=False)
    staff = {"Authorization": "Bearer staff-token"}
    sub = {"Authorization": "Bearer sub-token"}

    with TestClient(app) as client:
        # Corpus: every request carries a sentinel reason and a DSP flag,
        # spanning auto, pending, denied, invalid, and mirrored paths.
        for i in range(12):
            payload = {
                "sid": str(940000 + i),
                "assignment": "hw1" if i % 2 == 0 else "hw2",
                "days": [2, 6, 12][i % 3],
                "reason": f"SENTINEL-REASON-{i}",
                "dsp": True,
                "submitted_at": f"2026-02-03T10:{i:02d}:00+00:00",
            }
            assert client.post("/requests", json=payload, headers=sub).status_code == 201
        pending = client.get("/pending", headers=staff).json()["pending"]
        for i, item in enumerate(pending):
            response = client.post(
                f"/pending/{item['request']['id']}/decision",
                json={"action": "approve" if i % 2 == 0 else "deny"},
                headers=staff,
            )
            assert _scan_clean(json.dumps(response.json()))
        client.post("/dispatch", headers=staff)

        surfaces = {
            "pending": json.dumps(client.get("/pending", headers=staff).json()),
            "roster.json": json.dumps(client.get("/roster.json", headers=staff).json()),
            "roster.csv": client.get("/roster.csv", headers=staff).text,
            "outbox": json.dumps(client.get("/outbox", headers=staff).json()),
            "audit": json.dumps(client.get("/audit", headers=staff).json()),
        }
        for name, blob in surfaces.items():
            assert _scan_clean(blob), f"leak via {name}"

        # The restricted CSV's dsp column must be blank row by row.
        rows = list(csv.reader(io.StringIO(surfaces["roster.csv"])))
        dsp_col = rows[0].index("dsp")
        reason_col = rows[0].index("latest_reason")
        for row in rows[1:]:
            assert row[dsp_col] == "" and row[reason_col] == ""

        # Full view exists and does show the data (the scan is meaningful).
        full = client.get("/roster.json", params={"view": "full"}, headers=staff).json()
        assert "SENTINEL" in json.dumps(full)

    # Library-level exports on the same state.
    restricted_csv = export_roster_csv(
        project_roster(service.log.snapshot, ViewerRole.RESTRICTED)
    ).decode()
    assert _scan_clean(restricted_csv)

    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        written = write_report(service.log.snapshot, Path(tmp))
        report_csv = written["roster_csv"].read_text()
        summary = written["summary_json"].read_text()
        assert _scan_clean(report_csv) and _scan_clean(summary)

    checked = len(surfaces) + 3
    _passed(
        f"privacy: {checked} restricted surfaces scanned over a sentinel corpus; "
        "no reason or DSP content leaked"
    )
