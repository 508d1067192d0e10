"""Command line entry point: serve the API, run the survey statistics
report, drive scenarios, and dump request event traces."""

from __future__ import annotations

import json
import sys
import threading
import time
from pathlib import Path

import click

from .catalog import load_catalog
from .clock import VirtualClock, WallClock, render_timestamp
from .domain import BrokerError
from .georegistry import PharmacyRegistry, load_pharmacy_seed
from .service import BrokerService, load_token_table
from .store import DB_FILENAME, Store

TICK_INTERVAL_S = 1.0


@click.group()
def main() -> None:
    """Medicine-availability broker."""


@main.command()
@click.option("--listen", default="127.0.0.1:8000", show_default=True, help="host:port")
@click.option("--data-dir", "data_dir", type=click.Path(), default="./data", show_default=True)
@click.option("--catalog", "catalog_path", type=click.Path(exists=True), default=None,
              help="medicine file (default: <data-dir>/medicines.csv)")
@click.option("--pharmacies", "pharmacies_path", type=click.Path(exists=True), default=None,
              help="pharmacy seed file (default: <data-dir>/pharmacies.csv)")
@click.option("--tokens", "tokens_path", type=click.Path(exists=True), default=None,
              help="token table (default: <data-dir>/tokens.csv)")
@click.option("--virtual-clock/--no-virtual-clock", default=False, show_default=True,
              help="start frozen virtual time driven by POST /admin/advance-clock")
@click.option("--ui-dir", type=click.Path(exists=True), default=None,
              help="serve static UI assets from this directory under /ui")
def serve(listen, data_dir, catalog_path, pharmacies_path, tokens_path, virtual_clock, ui_dir):
    """Start the HTTP service."""
    import uvicorn

    from .api import create_app

    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    catalog_path = catalog_path or data_dir / "medicines.csv"
    pharmacies_path = pharmacies_path or data_dir / "pharmacies.csv"
    tokens_path = tokens_path or data_dir / "tokens.csv"

    try:
        service = BrokerService(
            registry=PharmacyRegistry(load_pharmacy_seed(pharmacies_path)),
            catalog=load_catalog(catalog_path),
            store=Store(data_dir / DB_FILENAME),
            clock=VirtualClock() if virtual_clock else WallClock(),
            tokens=load_token_table(tokens_path),
        )
    except (BrokerError, OSError) as exc:
        raise click.ClickException(str(exc))

    app = create_app(service)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    if not virtual_clock:
        def drive():
            while True:
                time.sleep(TICK_INTERVAL_S)
                service.tick_all()

        threading.Thread(target=drive, daemon=True, name="tick-driver").start()

    host, _, port = listen.partition(":")
    click.echo(
        f"serving on {listen} (clock: {'virtual' if virtual_clock else 'wall'}, "
        f"pharmacies: {len(service.registry.snapshot().pharmacies)}, "
        f"medicines: {len(service.catalog)})"
    )
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000), log_level="warning")


@main.command()
@click.option("--crosstabs", "crosstabs_path", type=click.Path(exists=True), default=None,
              help="contingency-table fixture (default: shipped survey data)")
@click.option("--frequencies", "frequencies_path", type=click.Path(exists=True), default=None,
              help="frequency fixture (default: shipped survey data)")
@click.option("--out-dir", type=click.Path(), default=None,
              help="also write delimited results and figures here")
@click.option("--figures/--no-figures", default=True, show_default=True)
def stats(crosstabs_path, frequencies_path, out_dir, figures):
    """Cross-tabulation chi-square report plus frequency tables."""
    from .report import run_report

    try:
        text = run_report(
            crosstabs_path=crosstabs_path,
            frequencies_path=frequencies_path,
            out_dir=out_dir,
            figures=figures,
        )
    except BrokerError as exc:
        raise click.ClickException(str(exc))
    click.echo(text)
    if out_dir:
        click.echo(f"results written under {out_dir}")


@main.group()
def harness() -> None:
    """Scenario tooling."""


@harness.command("seed")
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--data-dir", required=True, type=click.Path())
def harness_seed(scenario_file, data_dir):
    """Write a scenario's world into a fresh data directory."""
    from .harness import load_scenario, seed_data_dir

    try:
        counts = seed_data_dir(load_scenario(scenario_file), data_dir)
    except BrokerError as exc:
        raise click.ClickException(str(exc))
    click.echo(
        f"seeded {data_dir}: {counts['pharmacies']} pharmacies, "
        f"{counts['medicines']} medicines, {counts['users']} users"
    )


@harness.command("run")
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--server", default=None,
              help="server URL (must run with --virtual-clock); omit for embedded in-process run")
@click.option("--transcript", "transcript_path", type=click.Path(), default=None)
def harness_run(scenario_file, server, transcript_path):
    """Execute a scenario and report pass/fail per assertion."""
    from .harness import run_scenario

    try:
        result = run_scenario(scenario_file, server_url=server, transcript_path=transcript_path)
    except BrokerError as exc:
        raise click.ClickException(str(exc))
    for entry in result.transcript:
        checks = entry["checks"]
        status = "ok" if checks == "pass" else "FAIL"
        click.echo(f"[{status}] step {entry['step']} t+{entry['at']}s {entry['action']}")
    if result.failures:
        for failure in result.failures:
            click.echo(f"FAIL: {failure}", err=True)
        sys.exit(1)
    click.echo(f"scenario '{result.name}': all assertions passed")


@main.command("log-dump")
@click.argument("request_id")
@click.option("--data-dir", required=True, type=click.Path(exists=True))
def log_dump(request_id, data_dir):
    """Print the event trace of one availability request."""
    store = Store(Path(data_dir) / DB_FILENAME)
    try:
        stored = store.events(request_id)
        if not stored:
            raise click.ClickException(f"no events for request {request_id!r}")
        for item in stored:
            event = item.event
            click.echo(
                f"{item.sequence:4d}  {render_timestamp(event.at)}  "
                f"{event.kind.value:18s}  {json.dumps(event.payload, sort_keys=True)}"
            )
    finally:
        store.close()


if __name__ == "__main__":
    main()
