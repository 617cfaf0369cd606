"""Form-response intake: CSV exports and JSON submissions.

Rows arrive shaped like the request form (one column per question, plus the
auto-collected timestamp and respondent email). A :class:`FieldMapping`
translates per-course question wording into canonical fields, so the
question set stays editable without code changes. Parsing is deliberately
forgiving about answer formatting and strict about accounting: a bad row
never aborts a batch, and every row lands in exactly one of
accepted / skipped-duplicate / error.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional

from .model import Assignment, PartnerLink

#: Answers meaning "yes" for the partner and disability-program questions.
AFFIRMATIVE_ANSWERS = frozenset({"yes", "y", "true"})

#: Default ceiling for a parsed day count; catches typos like "300".
DEFAULT_HARD_CAP_DAYS = 30

CANONICAL_FIELDS = (
    "sid",
    "name",
    "dsp",
    "assignment",
    "days",
    "reason",
    "has_partner",
    "partner_contact",
    "email",
    "timestamp",
)

MANDATORY_FIELDS = ("sid", "assignment", "days")


class IngestionError(Exception):
    """Base for row-level intake failures; ``field`` names the culprit."""

    field: Optional[str] = None


class MissingField(IngestionError):
    def __init__(self, name: str):
        self.field = name
        super().__init__(f"mandatory question for field {name!r} missing from row")


class BadDays(IngestionError):
    field = "days"


class BadSid(IngestionError):
    field = "sid"


class BadPartner(IngestionError):
    """Partner answer unusable. Downgraded to a warning: the request proceeds
    without the partner link rather than being rejected."""

    field = "partner_contact"


class BadTimestamp(IngestionError):
    field = "timestamp"


class UnknownAssignment(IngestionError):
    field = "assignment"

    def __init__(self, answer: str):
        self.answer = answer
        super().__init__(f"no assignment matches {answer!r}")


class AmbiguousAssignment(IngestionError):
    field = "assignment"

    def __init__(self, answer: str, candidates: list[str]):
        self.answer = answer
        self.candidates = candidates
        super().__init__(f"{answer!r} matches several assignments: {', '.join(candidates)}")


class MalformedCsv(Exception):
    """The file itself is unreadable; row-level problems never raise this."""


def _norm_header(text: str) -> str:
    return text.strip().casefold()


@dataclass(frozen=True)
class FieldMapping:
    """Question-text patterns mapped onto canonical fields.

    Pattern comparison trims whitespace and folds case, so per-course header
    variants map identically. Each canonical field may be mapped once.
    """

    patterns: dict[str, str]  # normalized question text -> canonical field

    def __post_init__(self):
        seen: set[str] = set()
        for question, canon in self.patterns.items():
            if canon not in CANONICAL_FIELDS:
                raise ValueError(f"unknown canonical field {canon!r} for question {question!r}")
            if canon in seen:
                raise ValueError(f"canonical field {canon!r} mapped more than once")
            seen.add(canon)
        for required in MANDATORY_FIELDS:
            if required not in seen:
                raise ValueError(f"mapping must cover mandatory field {required!r}")

    @classmethod
    def from_questions(cls, questions: dict[str, str]) -> "FieldMapping":
        return cls({_norm_header(q): canon for q, canon in questions.items()})

    def lookup(self, canon: str) -> Optional[str]:
        for question, c in self.patterns.items():
            if c == canon:
                return question
        return None


#: The stock question set, plus the two columns form exports add on their own.
DEFAULT_QUESTIONS = {
    "Timestamp": "timestamp",
    "Email Address": "email",
    "What is your student ID?": "sid",
    "What is your name?": "name",
    "Are you registered with the disabled students program?": "dsp",
    "Which assignment would you like an extension on?": "assignment",
    "How many days would you like an extension for?": "days",
    "Why do you need this extension?": "reason",
    "Are you working with a partner?": "has_partner",
    "What is your partner's email and student ID?": "partner_contact",
}


def default_mapping() -> FieldMapping:
    return FieldMapping.from_questions(DEFAULT_QUESTIONS)


@dataclass
class FormRow:
    """One response row: question text -> answer text, plus when it arrived."""

    answers: dict[str, str]
    submitted_at: Optional[datetime] = None


@dataclass
class RawSubmission:
    """Field values as extracted, before any normalization."""

    sid: str = ""
    name: str = ""
    dsp: str = ""
    assignment: str = ""
    days: str = ""
    reason: str = ""
    has_partner: str = ""
    partner_contact: str = ""
    email: str = ""
    submitted_at: Optional[datetime] = None


@dataclass
class SubmissionDraft:
    """One normalized draft request, not yet matched against the catalog.

    A multi-assignment answer produces several drafts sharing the same
    submission timestamp; ``assignment_answer`` holds one target each.
    """

    sid: str
    name: str
    email: str
    dsp: Optional[bool]
    assignment_answer: str
    days: int
    reason: str
    submitted_at: datetime
    partner: Optional[PartnerLink] = None
    warnings: list[str] = field(default_factory=list)


def parse_form_row(row: FormRow, mapping: FieldMapping) -> RawSubmission:
    """Extract mapped answers from a row, untrimmed and unvalidated.

    Raises MissingField for a mandatory question absent from the row;
    unmapped or optional-and-absent fields come back empty.
    """
    lookup = {_norm_header(q): a for q, a in row.answers.items()}
    raw = RawSubmission(submitted_at=row.submitted_at)
    for pattern, canon in mapping.patterns.items():
        if canon == "timestamp":
            continue  # handled by the CSV reader, which owns timestamp parsing
        if pattern in lookup:
            setattr(raw, canon, lookup[pattern])
        elif canon in MANDATORY_FIELDS:
            raise MissingField(canon)
    return raw


_DAYS_RE = re.compile(r"-?\d+")
_EMAIL_RE = re.compile(r"\S+@\S+")
_SID_RUN_RE = re.compile(r"(?<!\d)(\d{3,12})(?!\d)")


def _parse_days(text: str, hard_cap: int) -> int:
    match = _DAYS_RE.search(text)
    if not match:
        raise BadDays(f"no day count found in {text!r}")
    days = int(match.group())
    if days < 1:
        raise BadDays(f"day count must be positive, got {days}")
    if days > hard_cap:
        raise BadDays(f"day count {days} exceeds the cap of {hard_cap}; likely a typo")
    return days


def _parse_sid(text: str) -> str:
    digits = re.sub(r"\D", "", text)
    if not digits:
        raise BadSid(f"no digits in student id answer {text!r}")
    if not 3 <= len(digits) <= 12:
        raise BadSid(f"student id must have 3-12 digits, got {digits!r}")
    return digits


def is_affirmative(text: str) -> bool:
    return text.strip().casefold() in AFFIRMATIVE_ANSWERS


def _parse_partner_contact(text: str) -> PartnerLink:
    email_match = _EMAIL_RE.search(text)
    if not email_match:
        raise BadPartner(f"no email in partner contact {text!r}")
    email = email_match.group().strip(".,;").lower()
    if email.count("@") != 1:
        raise BadPartner(f"unparseable partner email in {text!r}")
    remainder = text[: email_match.start()] + text[email_match.end() :]
    sid_match = _SID_RUN_RE.search(remainder)
    if not sid_match:
        raise BadPartner(f"no student id in partner contact {text!r}")
    return PartnerLink(email=email, sid=sid_match.group(1))


def split_assignment_answer(answer: str) -> list[str]:
    """Comma/semicolon separated answer -> individual assignment names."""
    parts = [p.strip() for p in re.split(r"[,;]", answer)]
    return [p for p in parts if p]


def normalize_submission(
    raw: RawSubmission, hard_cap_days: int = DEFAULT_HARD_CAP_DAYS
) -> list[SubmissionDraft]:
    """Clean a raw submission into one draft per named assignment.

    Student ids keep digits only, emails are lowercased, and day counts are
    parsed out of free text. An unusable partner answer is downgraded to a
    warning so the request itself still proceeds.
    """
    sid = _parse_sid(raw.sid)
    days = _parse_days(raw.days, hard_cap_days)
    targets = split_assignment_answer(raw.assignment)
    if not targets:
        raise UnknownAssignment(raw.assignment)

    warnings: list[str] = []
    email = raw.email.strip().lower()
    if email and email.count("@") != 1:
        warnings.append(f"ignoring malformed email address {email!r}")
        email = ""

    name = raw.name.strip() or f"Student {sid}"
    dsp = is_affirmative(raw.dsp) if raw.dsp.strip() else None

    partner = None
    if is_affirmative(raw.has_partner):
        try:
            partner = _parse_partner_contact(raw.partner_contact)
        except BadPartner as exc:
            warnings.append(f"partner dropped: {exc}")

    submitted_at = raw.submitted_at or datetime.now(timezone.utc)
    return [
        SubmissionDraft(
            sid=sid,
            name=name,
            email=email,
            dsp=dsp,
            assignment_answer=target,
            days=days,
            reason=raw.reason.strip(),
            submitted_at=submitted_at,
            partner=partner,
            warnings=list(warnings),
        )
        for target in targets
    ]


def match_assignment(answer: str, catalog: Iterable[Assignment]) -> Assignment:
    """Resolve an assignment answer against the catalog.

    Tries exact slug, then exact display name, then a unique match after
    trimming and case-folding both sides. Anything else is an error rather
    than a guess.
    """
    catalog = list(catalog)
    if not catalog:
        raise UnknownAssignment(answer)
    for a in catalog:
        if answer == a.slug:
            return a
    for a in catalog:
        if answer == a.display_name:
            return a
    folded = answer.strip().casefold()
    candidates = [
        a
        for a in catalog
        if folded in (a.slug.strip().casefold(), a.display_name.strip().casefold())
    ]
    if not candidates:
        raise UnknownAssignment(answer)
    if len(candidates) > 1:
        raise AmbiguousAssignment(answer, [a.slug for a in candidates])
    return candidates[0]


_TIMESTAMP_FORMATS = (
    "%Y/%m/%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
)


def parse_timestamp(text: str) -> datetime:
    """Parse a response timestamp; naive values are taken as UTC."""
    cleaned = text.strip()
    if not cleaned:
        raise BadTimestamp("empty timestamp")
    candidate = cleaned.replace("Z", "+00:00")
    try:
        parsed = datetime.fromisoformat(candidate)
    except ValueError:
        parsed = None
    if parsed is None:
        for fmt in _TIMESTAMP_FORMATS:
            try:
                parsed = datetime.strptime(cleaned, fmt)
                break
            except ValueError:
                continue
    if parsed is None:
        raise BadTimestamp(f"unparseable timestamp {cleaned!r}")
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.astimezone(timezone.utc)


@dataclass
class RowError:
    row: int  # 1-based line number in the file, header is row 1
    error: str
    message: str
    field: Optional[str] = None

    def to_dict(self) -> dict:
        return {"row": self.row, "error": self.error, "message": self.message, "field": self.field}


@dataclass
class IngestReport:
    accepted: int = 0
    skipped_duplicates: int = 0
    errors: list[RowError] = field(default_factory=list)
    total_rows: int = 0
    request_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "skipped_duplicates": self.skipped_duplicates,
            "errors": [e.to_dict() for e in self.errors],
            "total_rows": self.total_rows,
            "request_ids": self.request_ids,
        }


# A sink receives every (draft, matched assignment) pair from one row as a
# single batch and reports how many it accepted vs skipped as duplicates,
# plus the ids of the requests it created.
RowSink = Callable[[list[tuple[SubmissionDraft, Assignment]]], tuple[int, int, list[str]]]


def ingest_csv(
    data: bytes,
    mapping: FieldMapping,
    catalog: Iterable[Assignment],
    sink: RowSink,
    hard_cap_days: int = DEFAULT_HARD_CAP_DAYS,
) -> IngestReport:
    """Run every data row of a CSV export through parse -> normalize -> match.

    Column order is irrelevant; only headers matter. Each row ends up
    accepted, skipped as a duplicate, or recorded as an error; a row is
    never partially ingested (all its assignment targets must match before
    anything is handed to the sink).
    """
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedCsv(f"not valid UTF-8: {exc}") from exc
    try:
        reader = csv.reader(io.StringIO(text))
        rows = list(reader)
    except csv.Error as exc:
        raise MalformedCsv(str(exc)) from exc
    if not rows:
        raise MalformedCsv("file has no header row")

    headers = rows[0]
    catalog = list(catalog)
    timestamp_pattern = mapping.lookup("timestamp")
    report = IngestReport()

    for line_no, cells in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in cells):
            continue  # blank padding row, not data
        report.total_rows += 1
        answers = {h: (cells[i] if i < len(cells) else "") for i, h in enumerate(headers)}
        try:
            submitted_at = None
            if timestamp_pattern is not None:
                lookup = {_norm_header(h): v for h, v in answers.items()}
                if timestamp_pattern not in lookup:
                    raise MissingField("timestamp")
                submitted_at = parse_timestamp(lookup[timestamp_pattern])
            raw = parse_form_row(FormRow(answers, submitted_at), mapping)
            drafts = normalize_submission(raw, hard_cap_days)
            bundle = [(draft, match_assignment(draft.assignment_answer, catalog)) for draft in drafts]
        except IngestionError as exc:
            report.errors.append(
                RowError(row=line_no, error=type(exc).__name__, message=str(exc), field=exc.field)
            )
            continue
        n_accepted, n_duplicate, ids = sink(bundle)
        report.request_ids.extend(ids)
        if n_accepted > 0:
            report.accepted += 1
        elif n_duplicate > 0:
            report.skipped_duplicates += 1
    return report


#: Canonical field names accepted in an API submission object.
JSON_SUBMISSION_FIELDS = frozenset(
    {
        "sid",
        "name",
        "dsp",
        "assignment",
        "days",
        "reason",
        "has_partner",
        "partner_email",
        "partner_sid",
        "submitted_at",
    }
)


class UnknownField(IngestionError):
    def __init__(self, name: str):
        self.field = name
        super().__init__(f"unknown submission field {name!r}")


def _as_answer(value) -> str:
    """JSON scalars become the answer text the form parser expects."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "yes" if value else "no"
    return str(value)


def parse_json_submission(
    payload: dict,
    default_submitted_at: datetime,
    hard_cap_days: int = DEFAULT_HARD_CAP_DAYS,
) -> list[SubmissionDraft]:
    """Normalize an API submission object into drafts.

    The JSON schema uses the canonical field names directly and splits
    the partner contact into partner_email and partner_sid; everything
    else goes through the same normalization as a form row.  Unknown
    fields are an error, not ignored: a misspelled field name silently
    dropping data would be worse than a 400.
    """
    for key in payload:
        if key not in JSON_SUBMISSION_FIELDS:
            raise UnknownField(str(key))
    for required in ("sid", "assignment", "days"):
        if required not in payload or payload[required] in (None, ""):
            raise MissingField(required)

    submitted_at = default_submitted_at
    if payload.get("submitted_at") not in (None, ""):
        submitted_at = parse_timestamp(str(payload["submitted_at"]))

    partner_contact = ""
    if is_affirmative(_as_answer(payload.get("has_partner"))):
        partner_contact = (
            f"{_as_answer(payload.get('partner_email'))} "
            f"{_as_answer(payload.get('partner_sid'))}"
        ).strip()

    raw = RawSubmission(
        sid=_as_answer(payload.get("sid")),
        name=_as_answer(payload.get("name")),
        dsp=_as_answer(payload.get("dsp")),
        assignment=_as_answer(payload.get("assignment")),
        days=_as_answer(payload.get("days")),
        reason=_as_answer(payload.get("reason")),
        has_partner=_as_answer(payload.get("has_partner")),
        partner_contact=partner_contact,
        email="",
        submitted_at=submitted_at,
    )
    return normalize_submission(raw, hard_cap_days)
