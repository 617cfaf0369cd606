"""Command-line entry points.

Exit codes: 0 on success, 1 on operational failures (drift found,
unreadable input), 2 on configuration errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import AppConfig, ConfigError, load_config, write_example_config
from .ingestion import MalformedCsv
from .model import ViewerRole
from .notifier import write_default_templates
from .pipeline import ExtensionService
from .report import write_report
from .roster import export_roster_csv, project_roster

_view_option = click.option(
    "--view",
    type=click.Choice(["restricted", "full"]),
    default="restricted",
    show_default=True,
    help="Whether sensitive columns (reason, disability program) are included.",
)

_config_option = click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    default=Path("config.yaml"),
    show_default=True,
    help="Path to the service configuration file.",
)


def _load(config_path: Path) -> AppConfig:
    try:
        return load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)


def _slug_order(config: AppConfig, service: ExtensionService) -> list[str]:
    slugs = [a.slug for a in config.assignments]
    return slugs + sorted(set(service.log.snapshot.assignments) - set(slugs))


@click.group()
def main() -> None:
    """Assignment-extension service: policy, notifications, LMS sync."""


@main.command()
@click.option(
    "--dir",
    "target",
    type=click.Path(path_type=Path),
    default=Path("."),
    show_default=True,
    help="Directory to scaffold into.",
)
def init(target: Path) -> None:
    """Write a starter config.yaml and editable email templates."""
    target.mkdir(parents=True, exist_ok=True)
    config_path = target / "config.yaml"
    if config_path.exists():
        click.echo(f"{config_path} already exists; not overwriting", err=True)
        sys.exit(1)
    write_example_config(config_path)
    written = write_default_templates(target / "templates")
    click.echo(f"wrote {config_path}")
    for path in written:
        click.echo(f"wrote {path}")
    click.echo("edit the tokens before serving")


@main.command()
@_config_option
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(config_path: Path, host: str) -> None:
    """Run the HTTP service (submissions, review queue, roster, audit)."""
    from .service import serve as run_service

    config = _load(config_path)
    run_service(config, host=host)


@main.command()
@_config_option
@click.argument("csv_file", type=click.Path(exists=True, path_type=Path))
def ingest(config_path: Path, csv_file: Path) -> None:
    """Ingest a form-export CSV; decisions are made synchronously.

    Re-running on the same file is safe: rows already seen are counted
    as duplicates and skipped.  Run `dispatch` (or `serve`) afterwards
    to deliver the queued email and push approved extensions.
    """
    config = _load(config_path)
    service = ExtensionService.from_config(config)
    try:
        report = service.ingest_csv_bytes(csv_file.read_bytes())
    except MalformedCsv as exc:
        click.echo(f"cannot ingest {csv_file}: {exc}", err=True)
        sys.exit(1)
    finally:
        service.close()
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@_config_option
def dispatch(config_path: Path) -> None:
    """Run one delivery cycle: send due email, apply approved extensions."""
    config = _load(config_path)
    service = ExtensionService.from_config(config)
    try:
        report = service.dispatch_cycle()
    finally:
        service.close()
    click.echo(json.dumps(report, indent=2))


@main.command()
@_config_option
@_view_option
@click.option(
    "-o",
    "--output",
    type=click.Path(path_type=Path),
    default=None,
    help="Write the roster CSV here instead of stdout.",
)
def roster(config_path: Path, view: str, output: Path | None) -> None:
    """Project the per-student roster from the event log."""
    config = _load(config_path)
    service = ExtensionService.from_config(config)
    try:
        entries = project_roster(service.log.snapshot, ViewerRole(view))
        data = export_roster_csv(entries, _slug_order(config, service))
    finally:
        service.close()
    if output is None:
        click.echo(data.decode("utf-8"), nl=False)
    else:
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_bytes(data)
        click.echo(f"wrote {output}")


@main.command()
@_config_option
@_view_option
@click.option(
    "-o",
    "--out-dir",
    type=click.Path(path_type=Path),
    default=Path("report"),
    show_default=True,
    help="Directory for the rendered artifacts.",
)
def report(config_path: Path, view: str, out_dir: Path) -> None:
    """Render roster.csv, summary.json, and PNG charts into a directory."""
    config = _load(config_path)
    service = ExtensionService.from_config(config)
    try:
        written = write_report(
            service.log.snapshot,
            out_dir,
            ViewerRole(view),
            slugs=_slug_order(config, service),
            course_name=config.course_name,
        )
    finally:
        service.close()
    for path in written.values():
        click.echo(f"wrote {path}")


@main.command()
@_config_option
def reconcile(config_path: Path) -> None:
    """Compare the event log against the LMS; exit 1 when they drift."""
    config = _load(config_path)
    service = ExtensionService.from_config(config)
    try:
        drift = service.reconcile()
    finally:
        service.close()
    click.echo(json.dumps(drift.to_dict(), indent=2))
    if not drift.is_clean():
        sys.exit(1)


if __name__ == "__main__":
    main()
