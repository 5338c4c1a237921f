"""Command-line interface for running attack scenarios and the feasibility matrix."""

from __future__ import annotations

import sys

import click

from .config import SimConfig
from .errors import ConfigError
from .harness import (
    ScenarioConfig,
    emit_report,
    footnote_checks,
    load_scenario,
    run_matrix,
    run_scenario,
)


@click.group()
def cli() -> None:
    """Deterministic RDMA/NVMe-oF attack simulator."""


@cli.command()
@click.option("--scenario", "scenario_path", type=click.Path(exists=True), default=None,
              help="YAML scenario file.")
@click.option("--matrix", is_flag=True, help="Run the full 7x2x3 feasibility matrix.")
@click.option("--check-against-paper", is_flag=True,
              help="Exit nonzero unless every matrix cell matches the embedded expectations.")
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--widths", type=click.Choice(["test", "paper"]), default="test", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the report here instead of standard output.")
def run(scenario_path, matrix, check_against_paper, fmt, seed, widths, out_path) -> None:
    """Run a scenario or the feasibility matrix and emit a report."""
    try:
        if scenario_path is not None:
            scenario = load_scenario(scenario_path)
            if matrix:
                scenario.matrix = True
            report = run_scenario(scenario)
        else:
            if not matrix:
                raise ConfigError("either --scenario or --matrix is required")
            scenario = ScenarioConfig(seed=seed, widths=widths, matrix=True)
            report = run_scenario(scenario)
    except ConfigError as exc:
        raise click.ClickException(str(exc))

    text = emit_report(report, fmt)
    if out_path is not None:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)

    if check_against_paper:
        failures = []
        if not report.is_complete_matrix():
            failures.append("report is not a complete 7x2x3 matrix")
        for attack, model, level, expected, actual in report.mismatches():
            failures.append(
                f"{attack} {model}/{level}: expected "
                f"{'yes' if expected else 'no'}, got {'yes' if actual else 'no'}"
            )
        cfg = (
            SimConfig.test_profile(seed)
            if widths == "test"
            else SimConfig.paper_profile(seed)
        )
        for name, ok in footnote_checks(cfg).items():
            if not ok:
                failures.append(f"footnote check failed: {name}")
        if failures:
            for line in failures:
                click.echo(f"MISMATCH: {line}", err=True)
            sys.exit(1)
        click.echo("all 42 cells and 3 footnote nuances match", err=True)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
