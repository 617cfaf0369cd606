"""Command-line workflows against a real on-disk state directory."""

import json

import pytest
import yaml
from click.testing import CliRunner

from flextend.cli import main

from test_service import CSV_HEADER

CSV_BODY = (
    f"{CSV_HEADER}\n"
    "1/20/2026 10:00:00,alice@example.edu,600100,Alice,No,hw1,2,travel,No,\n"
    "1/20/2026 10:05:00,bob@example.edu,600200,Bob,Yes,hw2,3,illness,No,\n"
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def config_path(tmp_path):
    data = tmp_path / "data"
    config = {
        "course_name": "CS 61X",
        "tokens": {"submission": "s1", "staff": "s2"},
        "log_path": str(data / "events.ndjson"),
        "outbox_dir": str(data / "outbox"),
        "connector": {"kind": "file", "path": str(data / "lms.json")},
        "assignments": [
            {"slug": "hw1", "display_name": "HW1", "due_at": "2026-02-10T23:59:00+00:00"},
            {
                "slug": "hw2",
                "display_name": "HW2",
                "due_at": "2026-02-20T23:59:00+00:00",
                "max_extension_days": 10,
            },
        ],
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


def ingest(runner, config_path, tmp_path):
    csv_file = tmp_path / "responses.csv"
    csv_file.write_text(CSV_BODY, encoding="utf-8")
    return runner.invoke(main, ["ingest", "-c", str(config_path), str(csv_file)])


class TestInit:
    def test_scaffolds_config_and_templates(self, runner, tmp_path):
        target = tmp_path / "course"
        result = runner.invoke(main, ["init", "--dir", str(target)])
        assert result.exit_code == 0, result.output
        assert (target / "config.yaml").exists()
        templates = sorted(p.name for p in (target / "templates").glob("*.txt"))
        assert templates == [
            "auto_approved.txt",
            "denied.txt",
            "manual_approved.txt",
            "pending_ack.txt",
        ]

    def test_refuses_to_overwrite(self, runner, tmp_path):
        runner.invoke(main, ["init", "--dir", str(tmp_path)])
        result = runner.invoke(main, ["init", "--dir", str(tmp_path)])
        assert result.exit_code == 1


class TestConfigErrors:
    def test_unknown_key_exits_2(self, runner, tmp_path):
        bad = tmp_path / "config.yaml"
        bad.write_text("course_name: x\nsurprise_key: 1\n", encoding="utf-8")
        result = runner.invoke(main, ["roster", "-c", str(bad)])
        assert result.exit_code == 2
        assert "config error" in result.output

    def test_missing_file_exits_2(self, runner, tmp_path):
        result = runner.invoke(main, ["dispatch", "-c", str(tmp_path / "nope.yaml")])
        assert result.exit_code == 2


class TestIngestDispatch:
    def test_ingest_then_redispatch_is_idempotent(self, runner, config_path, tmp_path):
        first = ingest(runner, config_path, tmp_path)
        assert first.exit_code == 0, first.output
        report = json.loads(first.output)
        assert report["accepted"] == 2
        assert report["errors"] == []

        again = ingest(runner, config_path, tmp_path)
        assert json.loads(again.output) == {
            **report,
            "accepted": 0,
            "skipped_duplicates": 2,
            "request_ids": [],
        }
        # Two ingest runs, one set of events.
        log_lines = (tmp_path / "data" / "events.ndjson").read_text().splitlines()
        assert len(log_lines) == len(set(log_lines))

    def test_dispatch_delivers_and_applies(self, runner, config_path, tmp_path):
        ingest(runner, config_path, tmp_path)
        result = runner.invoke(main, ["dispatch", "-c", str(config_path)])
        assert result.exit_code == 0, result.output
        report = json.loads(result.output)
        assert report["outbox"]["sent"] == 2
        assert report["lms"]["applied"] == 2
        eml = list((tmp_path / "data" / "outbox").glob("*.eml"))
        assert len(eml) == 2
        lms = json.loads((tmp_path / "data" / "lms.json").read_text())
        assert set(lms) == {"alice@example.edu|hw1", "bob@example.edu|hw2"}
        # A second cycle finds nothing left to do.
        rerun = json.loads(runner.invoke(main, ["dispatch", "-c", str(config_path)]).output)
        assert rerun == {
            "outbox": {"sent": 0, "retried": 0, "failed": 0},
            "lms": {"applied": 0, "retry": 0, "failed": 0},
        }


class TestRoster:
    def test_stdout_is_restricted_by_default(self, runner, config_path, tmp_path):
        ingest(runner, config_path, tmp_path)
        result = runner.invoke(main, ["roster", "-c", str(config_path)])
        assert result.exit_code == 0
        assert "travel" not in result.output
        assert result.output.splitlines()[0].startswith("sid,name,email,dsp,latest_reason")
        full = runner.invoke(main, ["roster", "-c", str(config_path), "--view", "full"])
        assert "travel" in full.output and "yes" in full.output

    def test_output_file(self, runner, config_path, tmp_path):
        ingest(runner, config_path, tmp_path)
        out = tmp_path / "out" / "roster.csv"
        result = runner.invoke(main, ["roster", "-c", str(config_path), "-o", str(out)])
        assert result.exit_code == 0
        assert out.read_text().startswith("sid,")


class TestReportCommand:
    def test_renders_csv_figures_and_summary(self, runner, config_path, tmp_path):
        ingest(runner, config_path, tmp_path)
        out_dir = tmp_path / "report"
        result = runner.invoke(main, ["report", "-c", str(config_path), "-o", str(out_dir)])
        assert result.exit_code == 0, result.output
        assert (out_dir / "roster.csv").read_text().startswith("sid,")
        for name in ("status_breakdown.png", "days_histogram.png", "requests_timeline.png"):
            assert (out_dir / name).read_bytes()[:8] == PNG_MAGIC
        summary = json.loads((out_dir / "summary.json").read_text())
        assert summary["requests"]["total"] == 2
        assert summary["requests"]["by_status"] == {"automatic": 2}
        assert summary["students"] == 2
        assert summary["granted_days_total"] == 5
        assert "travel" not in (out_dir / "roster.csv").read_text()


class TestReconcile:
    def test_clean_after_dispatch_then_drift_after_tampering(
        self, runner, config_path, tmp_path
    ):
        ingest(runner, config_path, tmp_path)
        runner.invoke(main, ["dispatch", "-c", str(config_path)])
        clean = runner.invoke(main, ["reconcile", "-c", str(config_path)])
        assert clean.exit_code == 0, clean.output
        assert json.loads(clean.output) == {"missing": [], "mismatched": [], "orphaned": []}

        lms_path = tmp_path / "data" / "lms.json"
        state = json.loads(lms_path.read_text())
        state.pop("alice@example.edu|hw1")
        lms_path.write_text(json.dumps(state))
        drift = runner.invoke(main, ["reconcile", "-c", str(config_path)])
        assert drift.exit_code == 1
        assert json.loads(drift.output)["missing"]
