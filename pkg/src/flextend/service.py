"""HTTP surface over the pipeline: submissions in, staff review out.

Two static bearer tokens separate the submission role from the staff
role.  All staff reads default to the restricted view; ``?view=full``
opts into seeing reasons and disability-program flags.  Mutations raise
before anything is appended, so any 4xx leaves the log untouched.
"""

from __future__ import annotations

import logging
import threading
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.concurrency import run_in_threadpool
from fastapi.staticfiles import StaticFiles

from .config import AppConfig
from .ingestion import IngestionError, MalformedCsv
from .model import (
    ViewerRole,
    email_status_label,
    redact,
    request_status_label,
)
from .pipeline import AlreadyDecided, ExtensionService, UnknownRequest
from .policy import RULE_REQUEST_COUNT
from .roster import export_roster_csv, project_roster
from .store import Event, Snapshot

logger = logging.getLogger(__name__)

#: Payload keys whose values are sensitive in the audit stream.  Blanked
#: recursively for restricted viewers, mirroring the roster redaction.
#: Rendered bodies never embed the stated reason, but blanking them is
#: cheap insurance against a future template doing so.
_SENSITIVE_BLANK = ("reason", "body")
_SENSITIVE_NULL = ("dsp", "dsp_registered")


def _field_errors(*pairs: tuple[Optional[str], str]) -> dict:
    return {"errors": [{"field": field, "message": message} for field, message in pairs]}


def _bearer_token(request: Request) -> Optional[str]:
    header = request.headers.get("authorization", "")
    if not header.startswith("Bearer "):
        return None
    return header[len("Bearer ") :]


def _viewer_role(view: str) -> ViewerRole:
    try:
        return ViewerRole(view)
    except ValueError:
        raise HTTPException(
            status_code=400,
            detail=_field_errors(("view", f"view must be full or restricted, got {view!r}")),
        )


def _request_summary(snapshot: Snapshot, request, role: ViewerRole) -> dict:
    seen = redact(request, role)
    student = snapshot.students.get(str(seen.student))
    assignment = snapshot.assignments.get(seen.assignment)
    return {
        "id": seen.id,
        "sid": str(seen.student),
        "name": student.name if student else "",
        "email": student.email if student else "",
        "assignment": seen.assignment,
        "assignment_name": assignment.display_name if assignment else seen.assignment,
        "days_requested": seen.days_requested,
        "granted_days": seen.granted_days,
        "reason": seen.reason,
        "dsp": seen.dsp_registered,
        "submitted_at": seen.submitted_at.isoformat(),
        "status": request_status_label(seen.status, seen.decided_by),
        "rule_fired": seen.rule_fired,
        "decided_by": seen.decided_by,
        "partner_sid": seen.partner.sid if seen.partner else None,
        "origin_request_id": seen.origin_request_id,
        "invalid_errors": list(seen.invalid_errors),
    }


def _pending_item(service: ExtensionService, request, role: ViewerRole) -> dict:
    snapshot = service.log.snapshot
    # A request-count escalation means every per-request limit passed;
    # anything else tripped a real cap, so no suggestion is offered.
    suggested = "approve" if request.rule_fired == RULE_REQUEST_COUNT else "none"
    return {
        "request": _request_summary(snapshot, request, role),
        "rule_fired": request.rule_fired,
        "history": service.history_summary(str(request.student), request.id),
        "suggested_action": suggested,
    }


def _job_summary(job, role: ViewerRole) -> dict:
    out = {
        "id": job.id,
        "request_id": job.request_id,
        "template_key": job.template_key,
        "to": job.to,
        "subject": job.subject,
        "status": email_status_label(job.status),
        "attempts": job.attempts,
        "last_error": job.last_error,
        "next_attempt_at": None
        if job.next_attempt_at is None
        else job.next_attempt_at.isoformat(),
    }
    if role is ViewerRole.FULL:
        out["body"] = job.body
    return out


def _redact_payload(value, role: ViewerRole):
    if role is ViewerRole.FULL:
        return value
    if isinstance(value, dict):
        out = {}
        for key, inner in value.items():
            if key in _SENSITIVE_NULL:
                out[key] = None
            elif key in _SENSITIVE_BLANK and isinstance(inner, str):
                out[key] = ""
            else:
                out[key] = _redact_payload(inner, role)
        return out
    if isinstance(value, list):
        return [_redact_payload(item, role) for item in value]
    return value


def _event_summary(event: Event, role: ViewerRole) -> dict:
    return {
        "seq": event.seq,
        "at": event.at.isoformat(),
        "kind": event.kind.value,
        "actor": event.actor,
        "payload": _redact_payload(event.payload, role),
    }


async def _json_body(request: Request) -> dict:
    try:
        payload = await request.json()
    except Exception:
        raise HTTPException(400, detail=_field_errors((None, "body must be a JSON object")))
    if not isinstance(payload, dict):
        raise HTTPException(400, detail=_field_errors((None, "body must be a JSON object")))
    return payload


def create_app(
    service: ExtensionService,
    run_timer: bool = True,
    static_dir: Optional[Path] = None,
) -> FastAPI:
    config: AppConfig = service.config

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        stop = threading.Event()
        worker = None
        if run_timer:

            def loop():
                while not stop.wait(config.dispatch_interval_seconds):
                    try:
                        service.dispatch_cycle()
                    except Exception:
                        logger.exception("background dispatch cycle failed")

            worker = threading.Thread(target=loop, name="dispatch-timer", daemon=True)
            worker.start()
        try:
            yield
        finally:
            stop.set()
            if worker is not None:
                worker.join(timeout=5)

    app = FastAPI(title=f"{config.course_name} extensions", lifespan=lifespan)

    def require_staff(request: Request) -> None:
        if _bearer_token(request) != config.tokens.staff:
            raise HTTPException(403, detail="staff token required")

    def require_submitter(request: Request) -> None:
        if _bearer_token(request) not in (config.tokens.submission, config.tokens.staff):
            raise HTTPException(403, detail="submission token required")

    # -- submissions ---------------------------------------------------

    @app.post("/requests", status_code=201)
    async def post_request(request: Request):
        require_submitter(request)
        payload = await _json_body(request)
        try:
            outcomes = await run_in_threadpool(service.submit_json, payload)
        except IngestionError as exc:
            raise HTTPException(400, detail=_field_errors((exc.field, str(exc))))
        if outcomes and all(outcome.duplicate for outcome in outcomes):
            raise HTTPException(
                409,
                detail={
                    "message": "duplicate submission",
                    "requests": [outcome.to_dict() for outcome in outcomes],
                },
            )
        return {"requests": [outcome.to_dict() for outcome in outcomes]}

    @app.post("/ingest/csv")
    async def ingest_csv_endpoint(request: Request):
        require_staff(request)
        body = await request.body()
        try:
            report = await run_in_threadpool(service.ingest_csv_bytes, body)
        except MalformedCsv as exc:
            raise HTTPException(400, detail=_field_errors((None, str(exc))))
        return report.to_dict()

    # -- review queue --------------------------------------------------

    @app.get("/pending")
    def get_pending(request: Request, view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        return {
            "pending": [_pending_item(service, r, role) for r in service.pending_requests()]
        }

    @app.post("/pending/{request_id}/decision")
    async def post_decision(request_id: str, request: Request, view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        payload = await _json_body(request)
        action = payload.get("action")
        if action not in ("approve", "deny"):
            raise HTTPException(
                400, detail=_field_errors(("action", "action must be approve or deny"))
            )
        try:
            updated = await run_in_threadpool(
                service.decide,
                request_id,
                action,
                str(payload.get("staff_id") or "staff"),
                str(payload.get("note") or ""),
            )
        except UnknownRequest as exc:
            raise HTTPException(404, detail=str(exc))
        except AlreadyDecided as exc:
            raise HTTPException(
                409, detail={"message": str(exc), "status": exc.status_label}
            )
        return {"request": _request_summary(service.log.snapshot, updated, role)}

    # -- staff views ---------------------------------------------------

    @app.get("/roster.json")
    def roster_json(request: Request, view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        entries = project_roster(service.log.snapshot, role)
        return {"roster": [entry.to_dict() for entry in entries]}

    @app.get("/roster.csv")
    def roster_csv(request: Request, view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        entries = project_roster(service.log.snapshot, role)
        slugs = [a.slug for a in config.assignments]
        slugs += sorted(set(service.log.snapshot.assignments) - set(slugs))
        return Response(
            content=export_roster_csv(entries, slugs),
            media_type="text/csv; charset=utf-8",
        )

    @app.get("/outbox")
    def get_outbox(request: Request, view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        jobs = sorted(service.log.snapshot.email_jobs.values(), key=lambda j: j.id)
        return {"jobs": [_job_summary(job, role) for job in jobs]}

    @app.get("/audit")
    def get_audit(request: Request, since: str = Query("0"), view: str = Query("restricted")):
        require_staff(request)
        role = _viewer_role(view)
        last_seq = service.log.snapshot.last_seq
        try:
            seq = int(since)
        except ValueError:
            seq = -1
        if seq < 0 or seq > last_seq:
            raise HTTPException(
                416, detail=f"since must be between 0 and {last_seq}, got {since!r}"
            )
        events = service.log.events_since(seq)
        return {
            "events": [_event_summary(event, role) for event in events],
            "last_seq": last_seq,
        }

    # -- operations ----------------------------------------------------

    @app.post("/dispatch")
    async def post_dispatch(request: Request):
        require_staff(request)
        return await run_in_threadpool(service.dispatch_cycle)

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "course": config.course_name,
            "last_seq": service.log.snapshot.last_seq,
        }

    if static_dir is not None and (Path(static_dir) / "index.html").exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app


def serve(config: AppConfig, host: str = "127.0.0.1", static_dir: Optional[Path] = None) -> None:
    """Run the service until interrupted (the CLI entry point)."""
    import uvicorn

    service = ExtensionService.from_config(config)
    if static_dir is None:
        candidate = Path("frontend/dist")
        static_dir = candidate if candidate.exists() else None
    app = create_app(service, static_dir=static_dir)
    try:
        uvicorn.run(app, host=host, port=config.port, log_level="info")
    finally:
        service.close()
