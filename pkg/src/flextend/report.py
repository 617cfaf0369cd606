"""Static course report: roster CSV, summary JSON, and charts.

Figures aggregate counts only; nothing in a chart or the summary can
leak a stated reason or a disability-program answer, so only the roster
CSV varies with the viewer role.
"""

from __future__ import annotations

import json
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")  # headless rendering; must precede pyplot
import matplotlib.pyplot as plt

from .model import ViewerRole, email_status_label, request_status_label
from .roster import export_roster_csv, project_roster
from .store import Snapshot

#: Fixed label order so charts stay comparable between runs.
STATUS_ORDER = ["automatic", "pending approval", "manual", "invalid", "received"]
EMAIL_ORDER = ["automatic", "pending approval", "in queue", "manual", "sent", "failed"]


def _status_counts(snapshot: Snapshot) -> Counter:
    return Counter(
        request_status_label(r.status, r.decided_by) for r in snapshot.requests.values()
    )


def _email_counts(snapshot: Snapshot) -> Counter:
    return Counter(email_status_label(j.status) for j in snapshot.email_jobs.values())


def _bar(ax, labels: list[str], values: list[int], title: str) -> None:
    ax.bar(labels, values, color="#4878a8")
    ax.set_title(title)
    ax.set_ylabel("count")
    ax.tick_params(axis="x", rotation=20)
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _figure_status(snapshot: Snapshot, path: Path) -> Path:
    counts = _status_counts(snapshot)
    labels = [s for s in STATUS_ORDER if counts[s]] or ["no requests"]
    values = [counts[s] for s in STATUS_ORDER if counts[s]] or [0]
    fig, ax = plt.subplots(figsize=(6, 4))
    _bar(ax, labels, values, "Requests by status")
    return _save(fig, path)


def _figure_days(snapshot: Snapshot, path: Path) -> Path:
    requested = [r.days_requested for r in snapshot.requests.values()]
    granted = [r.granted_days for r in snapshot.requests.values() if r.granted_days > 0]
    fig, ax = plt.subplots(figsize=(6, 4))
    top = max(requested + granted, default=1)
    bins = [x + 0.5 for x in range(0, top + 1)]
    ax.hist(
        [requested, granted],
        bins=bins,
        label=["requested", "granted"],
        color=["#a8c4e0", "#4878a8"],
    )
    ax.set_title("Extension length (days)")
    ax.set_xlabel("days")
    ax.set_ylabel("requests")
    ax.legend()
    return _save(fig, path)


def _figure_timeline(snapshot: Snapshot, path: Path) -> Path:
    per_day = Counter(r.submitted_at.date() for r in snapshot.requests.values())
    days = sorted(per_day)
    fig, ax = plt.subplots(figsize=(7, 4))
    if days:
        ax.plot(days, [per_day[d] for d in days], marker="o", color="#4878a8")
        fig.autofmt_xdate(rotation=30)
    ax.set_title("Requests per day")
    ax.set_ylabel("requests")
    return _save(fig, path)


def _summary(snapshot: Snapshot, course_name: str, generated_at: datetime) -> dict:
    status = _status_counts(snapshot)
    email = _email_counts(snapshot)
    return {
        "course": course_name,
        "generated_at": generated_at.isoformat(),
        "requests": {
            "total": len(snapshot.requests),
            "by_status": {k: status[k] for k in sorted(status)},
        },
        "emails": {
            "total": len(snapshot.email_jobs),
            "by_status": {k: email[k] for k in sorted(email)},
        },
        "students": len(snapshot.students),
        "granted_days_total": sum(r.granted_days for r in snapshot.requests.values()),
    }


def write_report(
    snapshot: Snapshot,
    out_dir: Path,
    role: ViewerRole = ViewerRole.RESTRICTED,
    slugs: Optional[Sequence[str]] = None,
    course_name: str = "",
    generated_at: Optional[datetime] = None,
) -> dict[str, Path]:
    """Render every artifact into ``out_dir``; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generated_at = generated_at or datetime.now(timezone.utc)

    entries = project_roster(snapshot, role)
    (out_dir / "roster.csv").write_bytes(export_roster_csv(entries, slugs))
    (out_dir / "summary.json").write_text(
        json.dumps(_summary(snapshot, course_name, generated_at), indent=2) + "\n",
        encoding="utf-8",
    )
    return {
        "roster_csv": out_dir / "roster.csv",
        "summary_json": out_dir / "summary.json",
        "status_breakdown_png": _figure_status(snapshot, out_dir / "status_breakdown.png"),
        "days_histogram_png": _figure_days(snapshot, out_dir / "days_histogram.png"),
        "requests_timeline_png": _figure_timeline(snapshot, out_dir / "requests_timeline.png"),
    }
