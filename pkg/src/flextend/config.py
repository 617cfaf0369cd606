"""Single-file YAML configuration for the whole service.

One file declares the course, the policy thresholds, the assignment
catalog, auth tokens, and where state lives on disk.  Unknown keys are
rejected outright: a typo in a threshold name must fail loudly, not
silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import yaml

from .ingestion import DEFAULT_QUESTIONS, FieldMapping
from .model import Assignment
from .policy import AssignmentOverride, PolicyConfig


class ConfigError(Exception):
    """Configuration file is missing, unreadable, or invalid."""


def _require_keys(section: dict, allowed: set[str], context: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        names = ", ".join(sorted(unknown))
        raise ConfigError(f"unknown key(s) in {context}: {names}")


def _parse_dt(value, context: str) -> datetime:
    if isinstance(value, datetime):
        parsed = value
    else:
        try:
            parsed = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
        except ValueError as exc:
            raise ConfigError(f"{context}: not an ISO-8601 timestamp: {value!r}") from exc
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


@dataclass(frozen=True)
class TokenConfig:
    submission: str
    staff: str


@dataclass(frozen=True)
class EmailConfig:
    from_addr: str = "extensions@flextend.local"
    max_attempts: int = 5


@dataclass(frozen=True)
class ConnectorConfig:
    kind: str = "mock"  # "mock" or "file"
    path: Optional[Path] = None


@dataclass(frozen=True)
class AppConfig:
    course_name: str
    tokens: TokenConfig
    assignments: tuple[Assignment, ...]
    policy: PolicyConfig = PolicyConfig()
    port: int = 8061
    log_path: Path = Path("data/events.ndjson")
    outbox_dir: Path = Path("data/outbox")
    templates_dir: Optional[Path] = None
    connector: ConnectorConfig = ConnectorConfig()
    email: EmailConfig = EmailConfig()
    dispatch_interval_seconds: int = 30
    hard_cap_days: int = 30
    fsync: bool = False
    field_mapping: FieldMapping = field(
        default_factory=lambda: FieldMapping.from_questions(DEFAULT_QUESTIONS)
    )

    @property
    def catalog(self) -> list[Assignment]:
        return list(self.assignments)


_TOP_KEYS = {
    "course_name",
    "port",
    "tokens",
    "log_path",
    "outbox_dir",
    "templates_dir",
    "connector",
    "email",
    "dispatch_interval_seconds",
    "hard_cap_days",
    "fsync",
    "policy",
    "assignments",
    "field_mapping",
}

_POLICY_KEYS = {
    "auto_max_days_per_request",
    "auto_max_cumulative_days",
    "dsp_auto_max_days_per_request",
    "escalate_after_n_requests",
    "assignment_overrides",
    "request_window",
    "manual_denials",
}


def _parse_policy(section: dict) -> PolicyConfig:
    _require_keys(section, _POLICY_KEYS, "policy")
    overrides = {}
    for slug, value in (section.get("assignment_overrides") or {}).items():
        if value == "ineligible":
            overrides[slug] = AssignmentOverride(ineligible=True)
        elif isinstance(value, dict) and set(value) == {"max_days"}:
            overrides[slug] = AssignmentOverride(max_days=int(value["max_days"]))
        else:
            raise ConfigError(
                f"policy.assignment_overrides.{slug}: expected \"ineligible\" "
                f"or {{max_days: N}}, got {value!r}"
            )
    window = None
    if section.get("request_window") is not None:
        raw = section["request_window"]
        if not isinstance(raw, dict) or set(raw) != {"open_at", "close_at"}:
            raise ConfigError("policy.request_window needs exactly open_at and close_at")
        window = (
            _parse_dt(raw["open_at"], "policy.request_window.open_at"),
            _parse_dt(raw["close_at"], "policy.request_window.close_at"),
        )
    kwargs = {
        key: int(section[key])
        for key in (
            "auto_max_days_per_request",
            "auto_max_cumulative_days",
            "dsp_auto_max_days_per_request",
            "escalate_after_n_requests",
        )
        if key in section
    }
    try:
        return PolicyConfig(
            assignment_overrides=overrides,
            request_window=window,
            manual_denials=bool(section.get("manual_denials", False)),
            **kwargs,
        )
    except ValueError as exc:
        raise ConfigError(f"policy: {exc}") from exc


def _parse_assignments(raw) -> tuple[Assignment, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError("assignments: need a non-empty list")
    catalog = []
    seen = set()
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"assignments[{i}]: expected a mapping")
        _require_keys(
            item, {"slug", "display_name", "due_at", "max_extension_days"}, f"assignments[{i}]"
        )
        for required in ("slug", "display_name", "due_at"):
            if required not in item:
                raise ConfigError(f"assignments[{i}]: missing {required}")
        slug = str(item["slug"])
        if slug in seen:
            raise ConfigError(f"assignments[{i}]: duplicate slug {slug!r}")
        seen.add(slug)
        max_days = item.get("max_extension_days")
        try:
            catalog.append(
                Assignment(
                    slug=slug,
                    display_name=str(item["display_name"]),
                    due_at=_parse_dt(item["due_at"], f"assignments[{i}].due_at"),
                    max_extension_days=None if max_days is None else int(max_days),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"assignments[{i}]: {exc}") from exc
    return tuple(catalog)


def _parse_connector(section: dict) -> ConnectorConfig:
    _require_keys(section, {"kind", "path"}, "connector")
    kind = section.get("kind", "mock")
    if kind not in ("mock", "file"):
        raise ConfigError(f"connector.kind must be mock or file, got {kind!r}")
    path = section.get("path")
    if kind == "file" and path is None:
        raise ConfigError("connector.path is required when kind is file")
    return ConnectorConfig(kind=kind, path=None if path is None else Path(path))


def load_config_dict(data: dict) -> AppConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    _require_keys(data, _TOP_KEYS, "config")
    for required in ("course_name", "tokens", "assignments"):
        if required not in data:
            raise ConfigError(f"missing required key: {required}")

    tokens_raw = data["tokens"]
    if not isinstance(tokens_raw, dict):
        raise ConfigError("tokens: expected a mapping")
    _require_keys(tokens_raw, {"submission", "staff"}, "tokens")
    for role in ("submission", "staff"):
        if not tokens_raw.get(role):
            raise ConfigError(f"tokens.{role} must be a non-empty string")
    tokens = TokenConfig(
        submission=str(tokens_raw["submission"]), staff=str(tokens_raw["staff"])
    )
    if tokens.submission == tokens.staff:
        raise ConfigError("tokens.submission and tokens.staff must differ")

    email_raw = data.get("email") or {}
    _require_keys(email_raw, {"from_addr", "max_attempts"}, "email")
    email = EmailConfig(
        from_addr=str(email_raw.get("from_addr", EmailConfig.from_addr)),
        max_attempts=int(email_raw.get("max_attempts", EmailConfig.max_attempts)),
    )
    if email.max_attempts < 1:
        raise ConfigError("email.max_attempts must be positive")

    mapping = FieldMapping.from_questions(DEFAULT_QUESTIONS)
    if data.get("field_mapping"):
        raw_mapping = data["field_mapping"]
        if not isinstance(raw_mapping, dict):
            raise ConfigError("field_mapping: expected question -> field mapping")
        try:
            mapping = FieldMapping.from_questions(
                {str(q): str(f) for q, f in raw_mapping.items()}
            )
        except ValueError as exc:
            raise ConfigError(f"field_mapping: {exc}") from exc

    interval = int(data.get("dispatch_interval_seconds", 30))
    if interval < 1:
        raise ConfigError("dispatch_interval_seconds must be positive")
    hard_cap = int(data.get("hard_cap_days", 30))
    if hard_cap < 1:
        raise ConfigError("hard_cap_days must be positive")

    return AppConfig(
        course_name=str(data["course_name"]),
        tokens=tokens,
        assignments=_parse_assignments(data["assignments"]),
        policy=_parse_policy(data.get("policy") or {}),
        port=int(data.get("port", 8061)),
        log_path=Path(data.get("log_path", "data/events.ndjson")),
        outbox_dir=Path(data.get("outbox_dir", "data/outbox")),
        templates_dir=None if data.get("templates_dir") is None else Path(data["templates_dir"]),
        connector=_parse_connector(data.get("connector") or {}),
        email=email,
        dispatch_interval_seconds=interval,
        hard_cap_days=hard_cap,
        fsync=bool(data.get("fsync", False)),
        field_mapping=mapping,
    )


def load_config(path: Path) -> AppConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        raise ConfigError(f"config file {path} is empty")
    return load_config_dict(data)


EXAMPLE_CONFIG = """\
course_name: CS 61X
port: 8061

tokens:
  submission: change-me-submission-token
  staff: change-me-staff-token

log_path: data/events.ndjson
outbox_dir: data/outbox
# templates_dir: templates      # omit to use the built-in email templates
dispatch_interval_seconds: 30
hard_cap_days: 30
fsync: false

email:
  from_addr: extensions@example.edu
  max_attempts: 5

connector:
  kind: mock                    # or "file" with a path
  # path: data/lms.json

policy:
  auto_max_days_per_request: 3
  auto_max_cumulative_days: 7
  dsp_auto_max_days_per_request: 5
  escalate_after_n_requests: 6
  manual_denials: false
  # request_window:
  #   open_at: 2026-01-20T00:00:00Z
  #   close_at: 2026-05-15T00:00:00Z
  assignment_overrides: {}
  #   hw9: ineligible
  #   proj2: {max_days: 2}

assignments:
  - slug: hw1
    display_name: HW1
    due_at: 2026-02-01T23:59:00Z
  - slug: hw2
    display_name: HW2
    due_at: 2026-02-15T23:59:00Z
    max_extension_days: 10
"""


def write_example_config(path: Path) -> None:
    Path(path).write_text(EXAMPLE_CONFIG, encoding="utf-8")
