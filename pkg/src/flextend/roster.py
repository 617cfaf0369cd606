"""Per-student roster projection and its CSV export.

The roster is the staff-facing summary: one row per student who has
ever filed a request, with granted days, request status, and email
status per assignment.  It is a pure function of a snapshot; exporting
never mutates anything.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

from .model import (
    APPROVED_REQUEST_STATES,
    ExtensionRequest,
    ViewerRole,
    email_status_label,
    request_status_label,
)
from .store import Snapshot

CSV_FIXED_COLUMNS = ["sid", "name", "email", "dsp", "latest_reason", "latest_request_at"]


@dataclass
class AssignmentCell:
    granted_days: int = 0
    request_status: str = ""
    email_status: str = ""


@dataclass
class RosterEntry:
    sid: str
    name: str
    email: str
    dsp: Optional[bool]
    latest_reason: str
    latest_request_at: datetime
    cells: dict[str, AssignmentCell] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sid": self.sid,
            "name": self.name,
            "email": self.email,
            "dsp": self.dsp,
            "latest_reason": self.latest_reason,
            "latest_request_at": self.latest_request_at.isoformat(),
            "assignments": {
                slug: {
                    "granted_days": cell.granted_days,
                    "request_status": cell.request_status,
                    "email_status": cell.email_status,
                }
                for slug, cell in self.cells.items()
            },
        }


def _request_order(request: ExtensionRequest) -> tuple:
    return (request.submitted_at, request.id)


def project_roster(snapshot: Snapshot, viewer_role: ViewerRole) -> list[RosterEntry]:
    """One entry per student with at least one request, sorted by id.

    Granted days per assignment are the maximum over that student's
    approved requests for it, not the sum: a repeat request states the
    total extension wanted.  Status labels come from the latest request
    per assignment; the email status is the newest notification attached
    to that latest request.  Restricted viewers get dsp=None and an
    empty latest_reason; nothing else differs between the two views.
    """
    by_student: dict[str, list[ExtensionRequest]] = {}
    for request in snapshot.requests.values():
        by_student.setdefault(str(request.student), []).append(request)

    entries = []
    for sid in sorted(by_student, key=lambda s: (int(s), s)):
        requests = sorted(by_student[sid], key=_request_order)
        student = snapshot.students[sid]
        latest = requests[-1]
        cells: dict[str, AssignmentCell] = {}
        for slug in {r.assignment for r in requests}:
            for_slug = [r for r in requests if r.assignment == slug]
            granted = max(
                (r.granted_days for r in for_slug if r.status in APPROVED_REQUEST_STATES),
                default=0,
            )
            newest = for_slug[-1]
            jobs = snapshot.jobs_for(newest.id)
            cells[slug] = AssignmentCell(
                granted_days=granted,
                request_status=request_status_label(newest.status, newest.decided_by),
                email_status=email_status_label(jobs[-1].status) if jobs else "",
            )
        restricted = viewer_role is not ViewerRole.FULL
        entries.append(
            RosterEntry(
                sid=sid,
                name=student.name,
                email=student.email,
                dsp=None if restricted else student.dsp_registered,
                latest_reason="" if restricted else latest.reason,
                latest_request_at=latest.submitted_at,
                cells=cells,
            )
        )
    return entries


def _dsp_cell(dsp: Optional[bool]) -> str:
    if dsp is None:
        return ""
    return "yes" if dsp else "no"


def export_roster_csv(
    entries: Sequence[RosterEntry], slugs: Optional[Sequence[str]] = None
) -> bytes:
    """RFC-4180 CSV with three columns per assignment, in catalog order.

    ``slugs`` fixes the assignment column order; when omitted the union
    of slugs seen in the roster is used, sorted for stability.
    """
    if slugs is None:
        slugs = sorted({slug for entry in entries for slug in entry.cells})
    header = list(CSV_FIXED_COLUMNS)
    for slug in slugs:
        header += [f"{slug}_days", f"{slug}_status", f"{slug}_email_status"]

    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(header)
    for entry in entries:
        row = [
            entry.sid,
            entry.name,
            entry.email,
            _dsp_cell(entry.dsp),
            entry.latest_reason,
            entry.latest_request_at.isoformat(),
        ]
        for slug in slugs:
            cell = entry.cells.get(slug)
            if cell is None:
                row += ["", "", ""]
            else:
                row += [str(cell.granted_days), cell.request_status, cell.email_status]
        writer.writerow(row)
    return out.getvalue().encode("utf-8")
