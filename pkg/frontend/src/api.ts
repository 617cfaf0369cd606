// HTTP client for the extension service's staff API.
//
// Shapes mirror the JSON the service emits.  Under the restricted view
// the server blanks reasons and nulls the disability-program flag
// before anything reaches the wire, so privacy never depends on this
// client behaving well; the nullable fields here just reflect that.

export type View = "restricted" | "full";

export interface RequestSummary {
  id: string;
  sid: string;
  name: string;
  email: string;
  assignment: string;
  assignment_name: string;
  days_requested: number;
  granted_days: number;
  reason: string;
  dsp: boolean | null;
  submitted_at: string;
  status: string;
  rule_fired: string | null;
  decided_by: string | null;
  partner_sid: string | null;
  origin_request_id: string | null;
  invalid_errors: string[];
}

export interface PendingItem {
  request: RequestSummary;
  rule_fired: string | null;
  history: { prior_requests: number; cumulative_days: number };
  suggested_action: "approve" | "none";
}

export interface RosterCell {
  granted_days: number;
  request_status: string;
  email_status: string;
}

export interface RosterRow {
  sid: string;
  name: string;
  email: string;
  dsp: boolean | null;
  latest_reason: string;
  latest_request_at: string;
  assignments: Record<string, RosterCell>;
}

export interface OutboxJob {
  id: string;
  request_id: string;
  template_key: string;
  to: string;
  subject: string;
  status: string;
  attempts: number;
  last_error: string | null;
  next_attempt_at: string | null;
  body?: string; // full view only
}

export interface AuditEvent {
  seq: number;
  at: string;
  kind: string;
  actor: string;
  payload: Record<string, unknown>;
}

export interface AuditPage {
  events: AuditEvent[];
  last_seq: number;
}

export interface DispatchReport {
  outbox: { sent: number; retried: number; failed: number };
  lms: { applied: number; retry: number; failed: number };
}

export interface Health {
  status: string;
  course: string;
  last_seq: number;
}

export interface SubmissionOutcome {
  request_id: string;
  status: string;
  duplicate: boolean;
  granted_days: number;
  rule_fired: string | null;
  warnings: string[];
  mirrored_request_id: string | null;
  invalid_errors: string[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly detail: unknown = null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

// The request was already decided (by another staff member or by the
// policy engine); currentStatus is the label it holds now.
export class ConflictError extends ApiError {
  constructor(
    message: string,
    readonly currentStatus: string,
    detail: unknown = null,
  ) {
    super(409, message, detail);
    this.name = "ConflictError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

// Error bodies are {"detail": ...} where detail is a string, a
// {message} object, or {errors: [{field, message}]} for validation.
function describeDetail(detail: unknown, fallback: string): string {
  if (typeof detail === "string") return detail;
  if (detail && typeof detail === "object") {
    const box = detail as { message?: unknown; errors?: unknown };
    if (typeof box.message === "string") return box.message;
    if (Array.isArray(box.errors) && box.errors.length > 0) {
      return box.errors
        .map((err: { field?: string | null; message?: string }) =>
          `${err.field ?? "request"}: ${err.message ?? "invalid"}`)
        .join("; ");
    }
  }
  return fallback;
}

export class ApiClient {
  constructor(
    readonly baseUrl: string,
    public token: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async call(method: string, path: string, body?: unknown): Promise<Response> {
    const headers: Record<string, string> = { authorization: `Bearer ${this.token}` };
    const init: RequestInit = { method, headers };
    if (body !== undefined) {
      headers["content-type"] = "application/json";
      init.body = JSON.stringify(body);
    }
    const res = await this.fetchImpl(this.baseUrl + path, init);
    if (res.ok) return res;
    let detail: unknown = null;
    try {
      detail = ((await res.json()) as { detail?: unknown }).detail ?? null;
    } catch {
      // non-JSON error body; fall through with the status alone
    }
    const message = describeDetail(detail, `${method} ${path} failed with ${res.status}`);
    const status = (detail as { status?: unknown } | null)?.status;
    if (res.status === 409 && typeof status === "string") {
      throw new ConflictError(message, status, detail);
    }
    throw new ApiError(res.status, message, detail);
  }

  private async json<T>(method: string, path: string, body?: unknown): Promise<T> {
    const res = await this.call(method, path, body);
    return (await res.json()) as T;
  }

  health(): Promise<Health> {
    return this.json("GET", "/healthz");
  }

  async pending(view: View = "restricted"): Promise<PendingItem[]> {
    const page = await this.json<{ pending: PendingItem[] }>("GET", `/pending?view=${view}`);
    return page.pending;
  }

  async decide(
    requestId: string,
    action: "approve" | "deny",
    opts: { staffId?: string; note?: string; view?: View } = {},
  ): Promise<RequestSummary> {
    const view = opts.view ?? "restricted";
    const page = await this.json<{ request: RequestSummary }>(
      "POST",
      `/pending/${encodeURIComponent(requestId)}/decision?view=${view}`,
      { action, staff_id: opts.staffId, note: opts.note },
    );
    return page.request;
  }

  async roster(view: View = "restricted"): Promise<RosterRow[]> {
    const page = await this.json<{ roster: RosterRow[] }>("GET", `/roster.json?view=${view}`);
    return page.roster;
  }

  async rosterCsv(view: View = "restricted"): Promise<string> {
    const res = await this.call("GET", `/roster.csv?view=${view}`);
    return res.text();
  }

  async outbox(view: View = "restricted"): Promise<OutboxJob[]> {
    const page = await this.json<{ jobs: OutboxJob[] }>("GET", `/outbox?view=${view}`);
    return page.jobs;
  }

  // since is an exclusive lower bound: events with seq > since come
  // back.  Out-of-range cursors are a 416, not an empty page.
  audit(since: number, view: View = "restricted"): Promise<AuditPage> {
    return this.json("GET", `/audit?since=${since}&view=${view}`);
  }

  dispatch(): Promise<DispatchReport> {
    return this.json("POST", "/dispatch");
  }

  async submitRequest(payload: Record<string, unknown>): Promise<SubmissionOutcome[]> {
    const page = await this.json<{ requests: SubmissionOutcome[] }>("POST", "/requests", payload);
    return page.requests;
  }
}

// The dashboard's approve/deny buttons land here.
export function decideAction(
  client: ApiClient,
  requestId: string,
  action: "approve" | "deny",
  note = "",
): Promise<RequestSummary> {
  return client.decide(requestId, action, { note });
}
