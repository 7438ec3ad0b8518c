"""Command line interface for the boundary-control lab."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Annotated, NoReturn

import typer

from .config import ExperimentConfig, load_config
from .errors import BclabError
from .pipeline import RunResult, run_experiment, verify_invariants
from .plots import emit_plots

app = typer.Typer(add_completion=False, help="Boundary-control reconstruction lab.")

LOGGER = logging.getLogger(__name__)


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[
        Path | None,
        typer.Option("--config", "-c", dir_okay=False, help="TOML experiment file."),
    ] = None,
    out: Annotated[
        Path | None,
        typer.Option("--out", "-o", file_okay=False, help="Artifact directory."),
    ] = None,
    threads: Annotated[
        int | None,
        typer.Option(
            "--threads", "-j", min=1, help="Worker threads (default BCLAB_THREADS)."
        ),
    ] = None,
    seed: Annotated[
        int | None,
        typer.Option("--seed", help="Override the configured RNG seed."),
    ] = None,
    verbose: Annotated[
        bool,
        typer.Option("--verbose", "-v", help="Enable verbose logging."),
    ] = False,
) -> None:
    """Initialize CLI context."""
    ctx.obj = {"config": config, "out": out, "threads": threads, "seed": seed}
    _configure_logging(verbose)


def _load(ctx: typer.Context) -> ExperimentConfig:
    options = ctx.obj or {}
    try:
        return load_config(
            options.get("config"),
            output=options.get("out"),
            threads=options.get("threads"),
            seed=options.get("seed"),
        )
    except BclabError as err:
        _fail(err)


def _fail(err: BclabError) -> NoReturn:
    LOGGER.error("%s", err)
    typer.echo(f"error: {err}", err=True)
    raise typer.Exit(code=err.exit_code)


def _run(ctx: typer.Context, stages: list[str], **kwargs: object) -> RunResult:
    config = _load(ctx)
    try:
        result = run_experiment(config, stages, **kwargs)
    except BclabError as err:
        _fail(err)
    for name, record in result.stages.items():
        state = "cached" if record.cached else "done"
        typer.echo(f"{name}: {state} ({len(record.artifacts)} artifacts)")
    typer.echo(f"Artifacts in {result.output}")
    return result


@app.command()
def forward(ctx: typer.Context) -> None:
    """Build coefficients, the boundary chart and the D-to-N dataset."""
    _run(ctx, ["forward"])


@app.command()
def dtn(ctx: typer.Context) -> None:
    """Transform the dataset to the normal-form operator and its adjoint."""
    _run(ctx, ["forward", "dtn"])


@app.command()
def reconstruct(
    ctx: typer.Context,
    probe_budget: Annotated[
        int | None,
        typer.Option("--probe-budget", min=0, help="Cap on extra probe forward solves."),
    ] = None,
) -> None:
    """Extract slices and recover the coefficients on the collar."""
    _run(ctx, ["forward", "dtn", "reconstruct"], probe_budget=probe_budget)


@app.command()
def propagate(ctx: typer.Context) -> None:
    """Move the dataset across the known strip to the inner face."""
    _run(ctx, ["forward", "propagate"])


@app.command()
def verify(
    ctx: typer.Context,
    suite: Annotated[
        list[str] | None,
        typer.Option("--suite", "-s", help="Check to run (repeatable; default all)."),
    ] = None,
) -> None:
    """Run the invariant checks and write verify/report.json."""
    config = _load(ctx)
    try:
        report = verify_invariants(config, suite or None)
    except BclabError as err:
        _fail(err)
    for name, check in sorted(report["checks"].items()):
        mark = "pass" if check["passed"] else "FAIL"
        typer.echo(
            f"{name}: {mark} value={check['value']} threshold={check['threshold']}"
        )
    typer.echo(json.dumps({"passed": report["passed"]}))
    if not report["passed"]:
        raise typer.Exit(code=1)


@app.command()
def plots(ctx: typer.Context) -> None:
    """Write CSV series and PNG previews from an existing run directory."""
    config = _load(ctx)
    try:
        written = emit_plots(config.output)
    except BclabError as err:
        _fail(err)
    for path in written:
        typer.echo(f"Saved {path}")
