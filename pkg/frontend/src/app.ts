// Dashboard shell: tabs, a poll loop, and decision plumbing.  All
// state lives on the server; this page is a thin viewer that refreshes
// on an interval and immediately after every write.

import { ApiClient, ApiError, ConflictError, decideAction } from "./api.js";
import type { AuditEvent, View } from "./api.js";
import { clear, el } from "./dom.js";
import { renderAudit, renderOutbox, renderPending, renderRoster } from "./views.js";

const POLL_MS = 5000;
const AUDIT_KEEP = 200;

const TABS = [
  ["pending", "Pending review"],
  ["roster", "Roster"],
  ["outbox", "Outbox"],
  ["audit", "Audit"],
] as const;

type Tab = (typeof TABS)[number][0];

export class Dashboard {
  private readonly client: ApiClient;
  private view: View;
  private tab: Tab = "pending";
  private auditSeq = 0;
  private auditEvents: AuditEvent[] = [];
  private timer: ReturnType<typeof setInterval> | null = null;
  private noticeTimer: ReturnType<typeof setTimeout> | null = null;

  private readonly title = el("h1", "", "Extension requests");
  private readonly health = el("span", "health");
  private readonly banner = el("div", "banner");
  private readonly notice = el("div", "notice");
  private readonly content = el("div", "content");
  private readonly tabButtons = new Map<Tab, HTMLButtonElement>();

  constructor(private readonly root: HTMLElement) {
    this.client = new ApiClient("", window.localStorage.getItem("staff-token") ?? "");
    this.view = window.localStorage.getItem("dashboard-view") === "full" ? "full" : "restricted";
  }

  start(): void {
    this.buildChrome();
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), POLL_MS);
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
  }

  private buildChrome(): void {
    const header = el("header");
    header.append(this.title, this.health);

    const nav = el("nav");
    for (const [tab, label] of TABS) {
      const button = el("button", tab === this.tab ? "tab active" : "tab", label);
      button.addEventListener("click", () => {
        this.tab = tab;
        for (const [name, other] of this.tabButtons) {
          other.classList.toggle("active", name === tab);
        }
        void this.refresh();
      });
      this.tabButtons.set(tab, button);
      nav.appendChild(button);
    }

    const token = el("input", "token");
    token.type = "password";
    token.placeholder = "staff token";
    token.value = this.client.token;
    token.addEventListener("change", () => {
      this.client.token = token.value;
      window.localStorage.setItem("staff-token", token.value);
      void this.refresh();
    });

    const full = el("input");
    full.type = "checkbox";
    full.checked = this.view === "full";
    full.addEventListener("change", () => {
      this.view = full.checked ? "full" : "restricted";
      window.localStorage.setItem("dashboard-view", this.view);
      // Cached audit rows were redacted under the old view; refetch.
      this.auditSeq = 0;
      this.auditEvents = [];
      void this.refresh();
    });
    const fullLabel = el("label", "toggle");
    fullLabel.append(full, document.createTextNode(" show reasons and DSP flags"));

    const deliver = el("button", "deliver", "Deliver now");
    deliver.addEventListener("click", () => {
      void (async () => {
        try {
          const report = await this.client.dispatch();
          this.say(
            `Dispatch: ${report.outbox.sent} sent, ${report.lms.applied} applied, ` +
              `${report.outbox.failed + report.lms.failed} failed.`,
          );
        } catch (err) {
          this.say(err instanceof ApiError ? `Dispatch failed: ${err.message}` : "Dispatch failed.");
        }
        void this.refresh();
      })();
    });

    const controls = el("div", "controls");
    controls.append(token, fullLabel, deliver);

    this.root.append(header, nav, controls, this.banner, this.notice, this.content);
  }

  private async refresh(): Promise<void> {
    try {
      const health = await this.client.health();
      this.title.textContent = `${health.course} extensions`;
      document.title = `${health.course} extensions`;
      this.health.textContent = `${health.last_seq} events`;
      await this.refreshTab();
      this.setBanner("");
    } catch (err) {
      if (err instanceof ApiError && err.status === 403) {
        this.setBanner("Staff token rejected; paste a valid one above.");
      } else {
        this.setBanner("Cannot reach the service; retrying.");
      }
    }
  }

  private async refreshTab(): Promise<void> {
    if (this.tab === "audit") {
      await this.refreshAudit();
      return;
    }
    let rendered: HTMLElement;
    if (this.tab === "pending") {
      rendered = renderPending(await this.client.pending(this.view), this.onDecide);
    } else if (this.tab === "roster") {
      rendered = renderRoster(await this.client.roster(this.view));
    } else {
      rendered = renderOutbox(await this.client.outbox(this.view));
    }
    clear(this.content);
    this.content.appendChild(rendered);
  }

  private async refreshAudit(): Promise<void> {
    let page;
    try {
      page = await this.client.audit(this.auditSeq, this.view);
    } catch (err) {
      // 416 means the cursor outran a rebuilt log; start over.
      if (err instanceof ApiError && err.status === 416) {
        this.auditSeq = 0;
        this.auditEvents = [];
        page = await this.client.audit(0, this.view);
      } else {
        throw err;
      }
    }
    if (page.events.length > 0) {
      this.auditEvents = [...this.auditEvents, ...page.events].slice(-AUDIT_KEEP);
    }
    this.auditSeq = page.last_seq;
    clear(this.content);
    this.content.appendChild(renderAudit(this.auditEvents));
  }

  private readonly onDecide = (
    requestId: string,
    action: "approve" | "deny",
    note: string,
  ): void => {
    const tr = this.content.querySelector<HTMLElement>(`[data-request-id="${requestId}"]`);
    if (tr) {
      tr.classList.add("busy");
      tr.querySelectorAll("button").forEach((b) => (b.disabled = true));
    }
    void (async () => {
      try {
        const updated = await decideAction(this.client, requestId, action, note);
        const verb = action === "approve" ? "Approved" : "Denied";
        this.say(`${verb} ${updated.assignment_name} for ${updated.name || updated.sid}.`);
      } catch (err) {
        if (err instanceof ConflictError) {
          this.say(`Already decided elsewhere; the request is now "${err.currentStatus}".`);
        } else if (err instanceof ApiError) {
          this.say(`Decision failed: ${err.message}`);
        } else {
          this.say("Decision failed: cannot reach the service.");
        }
      }
      void this.refresh();
    })();
  };

  private say(message: string): void {
    this.notice.textContent = message;
    if (this.noticeTimer !== null) clearTimeout(this.noticeTimer);
    this.noticeTimer = setTimeout(() => (this.notice.textContent = ""), 8000);
  }

  private setBanner(message: string): void {
    this.banner.textContent = message;
    this.banner.classList.toggle("show", message !== "");
  }
}

const root = document.getElementById("app");
if (root) {
  new Dashboard(root).start();
}
