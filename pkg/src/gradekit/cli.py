"""``gradekit`` command line: validate, dry-run, grade, eval, prefs, report.

Exit codes: 0 success, 1 validation or data error, 2 backend or infrastructure error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import SEED_NAMES, load_config
from .gateway import GatewayError

EXIT_DATA = 1
EXIT_BACKEND = 2


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except GatewayError as exc:
            _fail(f"backend: {exc}", EXIT_BACKEND)
        except (ValueError, KeyError, FileNotFoundError) as exc:
            _fail(str(exc), EXIT_DATA)
        except OSError as exc:
            _fail(str(exc), EXIT_BACKEND)

    return wrapper


def run_options(fn):
    """Options shared by every subcommand that reads a run config."""
    opts = [
        click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Run config JSON."),
        click.option("--variant", type=click.Choice(["rubric", "examples", "both"]), default=None,
                     help="Prompt variant (overrides the config)."),
        click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Output directory."),
    ]
    opts += [
        click.option(f"--seed-{name}", f"seed_{name}", type=int, default=None, help=f"Override the {name} seed.")
        for name in SEED_NAMES
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _config(kwargs: dict):
    overrides = {"variant": kwargs.pop("variant"), "output_dir": kwargs.pop("output_dir")}
    for name in SEED_NAMES:
        overrides[f"seeds.{name}"] = kwargs.pop(f"seed_{name}")
    if overrides["output_dir"] is not None:
        overrides["output_dir"] = str(Path(overrides["output_dir"]).resolve())
    return load_config(kwargs.pop("config_path"), overrides)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int) -> None:
    """Rubric-based short-answer grading with LLM and human graders."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@run_options
@handle_errors
def validate(**kwargs) -> None:
    """Check rubrics, templates and data files."""
    cfg = _config(kwargs)
    diags = pipeline.validate_study(cfg)
    for d in diags:
        click.echo(d)
    if diags:
        _fail(f"{len(diags)} problem(s) found", EXIT_DATA)
    click.echo("ok: all rubrics, templates and data files are valid")


@main.command("dry-run")
@run_options
@click.option("--gold", "gold_path", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Gold labels (defaults to the config's).")
@click.option("--grader", "grader_id", default=None, help="LLM grader to use (defaults to the first).")
@handle_errors
def dry_run(gold_path, grader_id, **kwargs) -> None:
    """Grade gold-labeled answers with one LLM and list criterion mismatches."""
    cfg = _config(kwargs)
    mismatches, failed = pipeline.run_dry_run(cfg, gold_path, grader_id=grader_id)
    if not mismatches:
        click.echo("no criterion mismatches")
    else:
        click.echo("exercise\tanswer\tcriterion\tgold\tpredicted\tdescription")
        for m in mismatches:
            click.echo(f"{m.exercise_id}\t{m.answer_id}\t{m.criterion}\t{int(m.gold)}\t{int(m.predicted)}\t{m.description}")
    if failed:
        click.echo(f"could not grade: {', '.join(failed)}", err=True)
    click.echo(f"wrote {cfg.output_dir / 'dry_run.csv'}")


@main.command()
@run_options
@click.option("--overwrite", is_flag=True, help="Replace an existing grades.jsonl.")
@handle_errors
def grade(overwrite, **kwargs) -> None:
    """Assign answers to graders, grade them and export student feedback."""
    cfg = _config(kwargs)
    summary = pipeline.run_grade(cfg, overwrite=overwrite)
    click.echo(f"{summary['records']} records: " + ", ".join(f"{k} {v}" for k, v in summary["status"].items()))
    if summary["flags"]:
        click.echo("flags: " + ", ".join(f"{k} {v}" for k, v in summary["flags"].items()))
    if summary["pending"]:
        click.echo(f"{len(summary['pending'])} answer(s) await a human grade; exports withheld")
    else:
        click.echo(f"wrote {summary['exports']} student export(s) to {cfg.output_dir / 'exports'}")


@main.command()
@run_options
@click.option("--answer-id", required=True, help="Answer to regrade.")
@click.option("--satisfied", default=None, help="Comma-separated TA criteria; resolves a pending regrade.")
@click.option("--feedback", default=None, help="TA feedback for the resolved regrade.")
@handle_errors
def regrade(answer_id, satisfied, feedback, **kwargs) -> None:
    """Request a human regrade, or record its outcome."""
    cfg = _config(kwargs)
    labels = satisfied.split(",") if satisfied is not None else None
    result = pipeline.run_regrade(cfg, answer_id, labels, feedback)
    click.echo(f"{result['answer_id']}: {result['status']}")


@main.command("eval")
@run_options
@handle_errors
def eval_cmd(**kwargs) -> None:
    """Compare LLM graders against gold labels for every prompt variant."""
    cfg = _config(kwargs)
    summary = pipeline.run_eval(cfg)
    click.echo(f"evaluated {summary['runs']} grader/variant run(s) on {summary['gold_answers']} gold answers")
    click.echo(f"wrote {cfg.output_dir / 'report.csv'} and {cfg.output_dir / 'report.md'}")


@main.command()
@run_options
@handle_errors
def prefs(**kwargs) -> None:
    """Fit the ordered-probit model to satisfaction ratings."""
    cfg = _config(kwargs)
    summary = pipeline.run_prefs(cfg)
    for w in summary["warnings"]:
        click.echo(f"warning: {w}", err=True)
    click.echo(f"fit {summary['ratings']} ratings; contrasts against {summary['reference']}")
    click.echo(f"wrote posterior.csv, contrasts.csv and diagnostics.txt to {cfg.output_dir}")


@main.command()
@run_options
@handle_errors
def report(**kwargs) -> None:
    """Merge available outputs into report.md."""
    cfg = _config(kwargs)
    summary = pipeline.run_report(cfg)
    if summary["missing"]:
        click.echo("missing sections: " + ", ".join(summary["missing"]), err=True)
    click.echo(f"wrote {cfg.output_dir / 'report.md'}")


@main.command()
@click.argument("directory", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for the synthetic data.")
@click.option("--students", type=int, default=20, show_default=True)
@handle_errors
def demo(directory, seed, students) -> None:
    """Write a synthetic study with recorded replay fixtures."""
    from .synthetic import build_demo_study

    logging.getLogger("gradekit").setLevel(logging.ERROR)
    study = build_demo_study(directory, seed=seed, students=students)
    click.echo(json.dumps({"config": str(study.config), "answers": study.answers, "fixtures": study.fixtures}))


if __name__ == "__main__":
    main()
