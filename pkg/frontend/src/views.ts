// Render functions for the dashboard tabs.  Data in, DOM out: the app
// shell owns fetching and polling, these only draw what they are given,
// which keeps them testable without a server.

import type { AuditEvent, OutboxJob, PendingItem, RosterRow } from "./api.js";
import { el, row } from "./dom.js";

export type DecideHandler = (
  requestId: string,
  action: "approve" | "deny",
  note: string,
) => void;

// The restricted view arrives with dsp nulled; show that as blank so a
// redacted column and an explicit "no" stay distinguishable.
function dspText(dsp: boolean | null): string {
  if (dsp === null) return "";
  return dsp ? "yes" : "no";
}

function timeText(iso: string): string {
  return iso.replace("T", " ").slice(0, 16);
}

export function renderPending(items: PendingItem[], onDecide: DecideHandler): HTMLElement {
  if (items.length === 0) {
    return el("p", "empty", "No requests waiting for review.");
  }
  const table = el("table", "grid");
  table.appendChild(
    row(
      ["Student", "Assignment", "Days", "Reason", "DSP", "Rule", "History", "Decision"],
      "th",
    ),
  );
  for (const item of items) {
    const req = item.request;
    const note = el("input", "note");
    note.placeholder = "note (optional)";

    const approve = el("button", "approve", "Approve");
    if (item.suggested_action === "approve") {
      approve.classList.add("suggested");
      approve.title = "every per-request limit passed; only the request count tripped";
    }
    approve.addEventListener("click", () => onDecide(req.id, "approve", note.value));

    const deny = el("button", "deny", "Deny");
    deny.addEventListener("click", () => onDecide(req.id, "deny", note.value));

    const actions = el("span", "actions");
    actions.append(note, approve, deny);

    const history = `${item.history.prior_requests} prior, ${item.history.cumulative_days}d used`;
    const tr = row([
      `${req.name || req.sid} (${req.sid})`,
      `${req.assignment_name} (+${req.days_requested}d)`,
      String(req.days_requested),
      req.reason,
      dspText(req.dsp),
      item.rule_fired ?? "",
      history,
      actions,
    ]);
    tr.dataset.requestId = req.id;
    table.appendChild(tr);
  }
  return table;
}

export function renderRoster(rows: RosterRow[]): HTMLElement {
  if (rows.length === 0) {
    return el("p", "empty", "No requests yet.");
  }
  const slugs = [...new Set(rows.flatMap((r) => Object.keys(r.assignments)))].sort();
  const table = el("table", "grid");
  table.appendChild(
    row(["SID", "Name", "Email", "DSP", "Latest reason", "Last request", ...slugs], "th"),
  );
  for (const entry of rows) {
    const cells = slugs.map((slug) => {
      const cell = entry.assignments[slug];
      if (!cell) return "";
      return `+${cell.granted_days}d ${cell.request_status} / ${cell.email_status}`;
    });
    const tr = row([
      entry.sid,
      entry.name,
      entry.email,
      dspText(entry.dsp),
      entry.latest_reason,
      timeText(entry.latest_request_at),
      ...cells,
    ]);
    tr.dataset.sid = entry.sid;
    table.appendChild(tr);
  }
  return table;
}

export function renderOutbox(jobs: OutboxJob[]): HTMLElement {
  if (jobs.length === 0) {
    return el("p", "empty", "Outbox is empty.");
  }
  const table = el("table", "grid");
  table.appendChild(
    row(["Job", "Template", "To", "Subject", "Status", "Attempts", "Next attempt", "Error"], "th"),
  );
  for (const job of jobs) {
    const tr = row([
      job.id,
      job.template_key,
      job.to,
      job.subject,
      job.status,
      String(job.attempts),
      job.next_attempt_at ? timeText(job.next_attempt_at) : "",
      job.last_error ?? "",
    ]);
    tr.className = `status-${job.status.replace(" ", "-")}`;
    tr.dataset.jobId = job.id;
    table.appendChild(tr);
  }
  return table;
}

// Newest first: the tail is what staff come to check.
export function renderAudit(events: AuditEvent[]): HTMLElement {
  if (events.length === 0) {
    return el("p", "empty", "No events yet.");
  }
  const table = el("table", "grid audit");
  table.appendChild(row(["Seq", "At", "Kind", "Actor", "Payload"], "th"));
  for (const event of [...events].sort((a, b) => b.seq - a.seq)) {
    const payload = el("code", "", JSON.stringify(event.payload));
    const tr = row([String(event.seq), timeText(event.at), event.kind, event.actor, payload]);
    tr.dataset.seq = String(event.seq);
    table.appendChild(tr);
  }
  return table;
}
