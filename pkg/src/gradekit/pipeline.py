"""Subcommand implementations shared by the CLI and the demo builder.

Each ``run_*`` function reads a :class:`RunConfig`, writes its artifacts under
the output directory and returns a small summary.  Data problems raise
``ValueError`` subclasses; backend problems raise ``GatewayError``.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .config import RunConfig
from .data import DataError, HumanGrade, load_course, load_examples, load_gold, load_human_grades, load_submissions
from .evaluation import (
    feedback_length_stats,
    gold_correctness,
    grouped_reports,
    read_feedback_lengths_csv,
    read_report_csv,
    report_markdown,
    write_feedback_lengths_csv,
    write_report_csv,
)
from .gateway import Gateway, HTTPBackend, ReplayBackend
from .prefs.analysis import contrasts_vs_reference, diagnostics_text, write_contrasts_csv, write_posterior_csv
from .prefs.model import OrderedProbitModel, RatingData, load_ratings
from .prefs.sampler import SamplerConfig, sample_posterior
from .prompts import TemplateError, check_templates, load_templates
from .rubric import validate
from .seeding import derive_seed
from .study import (
    INCOMPLETE,
    AssignmentPlan,
    ExportRefused,
    GraderKind,
    GradeStore,
    Status,
    apply_human_grade,
    assign,
    export_student_view,
    latest_records,
    load_graders,
    request_regrade,
    run_grading,
    write_exports,
)

GRADES_FILE = "grades.jsonl"


@dataclass
class StudyInputs:
    course: dict
    submissions: list
    graders: list
    examples: dict
    templates: object

    @property
    def answer_exercise(self) -> dict:
        return {s.answer_id: s.exercise_id for s in self.submissions}


def _override_backends(graders: list, overrides: dict) -> list:
    if not overrides:
        return graders
    return [replace(g, backend=replace(g.backend, **overrides)) if g.backend else g for g in graders]


def load_inputs(cfg: RunConfig) -> StudyInputs:
    """Load and check everything grading needs; the first problem raises."""
    course = load_course(cfg.get("course"))
    for ex_id, ex in course.items():
        problems = validate(ex.rubric)
        if problems:
            raise DataError(f"exercise {ex_id}: {problems[0]}")
    templates = load_templates(cfg.get("templates"))
    problems = check_templates(templates)
    if problems:
        raise TemplateError(problems[0])
    submissions = load_submissions(cfg.get("submissions"), course)
    graders = _override_backends(load_graders(cfg.get("graders")), cfg.backend_overrides)
    examples = load_examples(cfg.get("examples"), course) if cfg.get("examples") else {}
    return StudyInputs(course, submissions, graders, examples, templates)


def make_gateway(cfg: RunConfig) -> Gateway:
    """Replay from fixtures when configured, otherwise live HTTP with a response cache."""
    if cfg.get("fixtures") is not None:
        return Gateway(ReplayBackend(cfg.get("fixtures")), max_in_flight=cfg.max_in_flight)
    cache_dir = cfg.get("cache_dir") or cfg.output_dir / "cache"
    return Gateway(HTTPBackend(), cache_dir=cache_dir, max_in_flight=cfg.max_in_flight)


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------


def validate_study(cfg: RunConfig) -> list[str]:
    """Diagnostics for every rubric, template and data file; empty when clean."""
    diags: list[str] = []

    def attempt(label, fn):
        try:
            return fn()
        except (ValueError, KeyError, OSError) as exc:
            diags.append(f"{label}: {exc}")
            return None

    course = attempt("course", lambda: load_course(cfg.get("course"), errors=diags)) or {}
    for ex_id, ex in course.items():
        diags += [f"exercise {ex_id}: {d}" for d in validate(ex.rubric)]
    templates = attempt("templates", lambda: load_templates(cfg.get("templates")))
    if templates is not None:
        diags += check_templates(templates)
    attempt("graders", lambda: load_graders(cfg.get("graders")))
    subs = attempt("submissions", lambda: load_submissions(cfg.get("submissions"), course)) or []
    if cfg.get("examples"):
        attempt("examples", lambda: load_examples(cfg.get("examples"), course))
    if cfg.get("gold"):
        attempt("gold", lambda: load_gold(cfg.get("gold"), subs, course))
    if cfg.get("human_grades"):
        attempt("human grades", lambda: load_human_grades(cfg.get("human_grades"), subs, course))
    if cfg.get("ratings"):
        attempt("ratings", lambda: load_ratings(cfg.get("ratings"), int(cfg.mcmc["levels"])))
    return diags


# --------------------------------------------------------------------------
# dry-run
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mismatch:
    exercise_id: str
    answer_id: str
    criterion: str
    gold: bool
    predicted: bool
    description: str


def _llm_grader(inputs: StudyInputs, grader_id: Optional[str]):
    llms = [g for g in inputs.graders if g.kind is GraderKind.LLM]
    if grader_id is not None:
        llms = [g for g in llms if g.grader_id == grader_id]
    if not llms:
        raise DataError(f"no LLM grader {grader_id!r} configured" if grader_id else "no LLM grader configured")
    return llms[0]


def run_dry_run(cfg: RunConfig, gold_path=None, gateway: Optional[Gateway] = None, grader_id: Optional[str] = None):
    """Grade the gold-labeled answers with one LLM and list criterion disagreements.

    Returns ``(mismatches, failed_answer_ids)``; mismatches are ordered by
    exercise (course order), answer and criterion.
    """
    gold_path = gold_path or cfg.get("gold")
    if gold_path is None or not Path(gold_path).exists():
        raise DataError("dry run needs gold labels (set 'gold' in the config or pass --gold)")
    inputs = load_inputs(cfg)
    gold = load_gold(gold_path, inputs.submissions, inputs.course)
    subs = [s for s in inputs.submissions if s.answer_id in gold]
    if not subs:
        raise DataError("no submissions carry gold labels")
    grader = _llm_grader(inputs, grader_id or cfg.dry_run_grader)
    gateway = gateway or make_gateway(cfg)
    plan = AssignmentPlan({s.answer_id: grader.grader_id for s in subs}, cfg.seeds["assignment"], {grader.grader_id: "1.0000"})
    records = run_grading(
        plan, inputs.course, subs, inputs.graders, cfg.variant, cfg.seeds["sampling"], gateway, inputs.templates,
        inputs.examples, example_count=cfg.example_count,
        resample_per_submission=cfg.resample_examples_per_submission,
    )
    order = {ex_id: i for i, ex_id in enumerate(inputs.course)}
    mismatches, failed = [], []
    for rec in sorted(records, key=lambda r: (order[r.exercise_id], r.answer_id)):
        if rec.status is not Status.AUTO:
            failed.append(rec.answer_id)
            continue
        for crit in inputs.course[rec.exercise_id].rubric.criteria:
            g, p = crit.label in gold[rec.answer_id], crit.label in rec.satisfied
            if g != p:
                mismatches.append(Mismatch(rec.exercise_id, rec.answer_id, crit.label, g, p, crit.description))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance
    with open(cfg.output_dir / "dry_run.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["exercise_id", "answer_id", "criterion", "gold", "predicted", "description", "grader", "config_hash", "seeds"])
        for m in mismatches:
            writer.writerow([m.exercise_id, m.answer_id, m.criterion, int(m.gold), int(m.predicted), m.description,
                             grader.grader_id, prov["config_hash"], prov["seeds_text"]])
    return mismatches, failed


# --------------------------------------------------------------------------
# grade
# --------------------------------------------------------------------------


def run_grade(cfg: RunConfig, gateway: Optional[Gateway] = None, overwrite: bool = False) -> dict:
    """Assign, grade, apply available human grades and export when complete."""
    inputs = load_inputs(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    grades_path = out / GRADES_FILE
    if grades_path.exists():
        if not overwrite:
            raise DataError(f"{grades_path} already exists; use a fresh output dir or --overwrite")
        grades_path.unlink()
    gateway = gateway or make_gateway(cfg)
    prov = cfg.provenance
    answer_ids = sorted(s.answer_id for s in inputs.submissions)
    consent = {s.answer_id: s.consent for s in inputs.submissions}
    plan = assign(answer_ids, inputs.graders, cfg.seeds["assignment"], consent)
    _write_json(out / "assignment.json", {**plan.to_dict(), "provenance": prov})
    store = GradeStore(grades_path)
    run_grading(
        plan, inputs.course, inputs.submissions, inputs.graders, cfg.variant, cfg.seeds["sampling"], gateway,
        inputs.templates, inputs.examples, store, cfg.example_count, cfg.resample_examples_per_submission, prov,
    )
    if cfg.get("human_grades"):
        human = load_human_grades(cfg.get("human_grades"), inputs.submissions, inputs.course)
        for answer_id, rec in sorted(store.latest().items()):
            if rec.status is Status.PENDING and answer_id in human:
                apply_human_grade(store, human[answer_id], inputs.course, inputs.graders, gateway,
                                  inputs.templates, cfg.review_revised)
    summary = _grade_summary(store)
    summary["exports"] = export_if_complete(cfg, store, inputs)
    return summary


def _grade_summary(store: GradeStore) -> dict:
    latest = store.latest()
    pending = sorted(a for a, r in latest.items() if r.status in INCOMPLETE)
    return {
        "records": len(latest),
        "status": dict(sorted(Counter(r.status.value for r in latest.values()).items())),
        "flags": dict(sorted(Counter(f for r in latest.values() for f in r.flags).items())),
        "pending": pending,
    }


def export_if_complete(cfg: RunConfig, store: GradeStore, inputs: Optional[StudyInputs] = None) -> int:
    """Write student exports; returns the number written, 0 when grading is incomplete."""
    inputs = inputs or load_inputs(cfg)
    try:
        docs = export_student_view(store.records(), inputs.course, inputs.graders, cfg.provenance)
    except ExportRefused:
        return 0
    return len(write_exports(docs, cfg.output_dir / "exports"))


def run_regrade(cfg: RunConfig, answer_id: str, satisfied=None, feedback: Optional[str] = None,
                gateway: Optional[Gateway] = None) -> dict:
    """Request a regrade, or resolve one when a TA grade is supplied."""
    store = GradeStore(cfg.output_dir / GRADES_FILE)
    if not store.path.exists():
        raise DataError(f"no grades at {store.path}")
    inputs = load_inputs(cfg)
    if satisfied is None:
        rec = request_regrade(store, answer_id)
    else:
        current = store.latest().get(answer_id)
        if current is None:
            raise DataError(f"unknown answer {answer_id}")
        labels = frozenset(s.strip().upper() for s in satisfied if s.strip())
        unknown = labels - set(inputs.course[current.exercise_id].rubric.labels)
        if unknown:
            raise DataError(f"unknown criterion {', '.join(sorted(unknown))}")
        grade = HumanGrade(answer_id, labels, feedback or "")
        rec = apply_human_grade(store, grade, inputs.course, inputs.graders, gateway or make_gateway(cfg), inputs.templates)
    export_if_complete(cfg, store, inputs)
    return {"answer_id": rec.answer_id, "status": rec.status.value}


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def run_eval(cfg: RunConfig, gateway: Optional[Gateway] = None) -> dict:
    """Benchmark every LLM grader and eval variant on the gold-labeled answers."""
    grades_path = cfg.output_dir / GRADES_FILE
    if not grades_path.exists():
        raise DataError(f"no grades at {grades_path}; run `gradekit grade` first")
    if cfg.get("gold") is None:
        raise DataError("evaluation needs gold labels ('gold' in the config)")
    inputs = load_inputs(cfg)
    gold = load_gold(cfg.get("gold"), inputs.submissions, inputs.course)
    subs = [s for s in inputs.submissions if s.answer_id in gold]
    gateway = gateway or make_gateway(cfg)
    prov = cfg.provenance
    runs, bench, mismatches = {}, [], {}
    for grader in (g for g in inputs.graders if g.kind is GraderKind.LLM):
        plan = AssignmentPlan({s.answer_id: grader.grader_id for s in subs}, cfg.seeds["assignment"], {grader.grader_id: "1.0000"})
        for variant in cfg.eval_variants:
            records = run_grading(
                plan, inputs.course, subs, inputs.graders, variant, cfg.seeds["sampling"], gateway, inputs.templates,
                inputs.examples, example_count=cfg.example_count,
                resample_per_submission=cfg.resample_examples_per_submission,
            )
            graded = [r for r in records if r.status is Status.AUTO]
            runs[(grader.grader_id, variant.value)] = {r.answer_id: r.satisfied for r in graded}
            mismatches[(grader.grader_id, variant.value)] = (sum(r.reconciled.tally_mismatch for r in graded), len(graded))
            for r in records:
                bench.append({
                    "answer_id": r.answer_id,
                    "grader": grader.grader_id,
                    "variant": variant.value,
                    "status": r.status.value,
                    "satisfied": sorted(r.satisfied) if r.satisfied is not None else None,
                    "final_score": r.reconciled.to_dict()["final_score"] if r.reconciled else None,
                    "tally_mismatch": bool(r.reconciled and r.reconciled.tally_mismatch),
                    "error": r.error,
                    "config_hash": prov["config_hash"],
                    "seeds": prov["seeds_text"],
                })
    answer_exercise = inputs.answer_exercise
    reports = grouped_reports(runs, gold, answer_exercise, inputs.course, cfg.bootstrap_resamples, cfg.seeds["bootstrap"])
    latest = latest_records(GradeStore(grades_path).records())
    correctness = gold_correctness(gold, answer_exercise, inputs.course)
    lengths = feedback_length_stats(
        ((a, r.grader_id, r.final_feedback) for a, r in sorted(latest.items())
         if r.status not in INCOMPLETE and r.final_feedback is not None),
        correctness,
    )
    out = cfg.output_dir
    write_report_csv(reports, out / "report.csv", prov)
    write_feedback_lengths_csv(lengths, out / "feedback_lengths.csv", prov)
    with open(out / "benchmark.jsonl", "w", encoding="utf-8") as fh:
        for row in bench:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    md = report_markdown(reports, lengths, prov) + _tally_markdown(mismatches)
    (out / "report.md").write_text(md, encoding="utf-8")
    return {"cells": len(reports), "runs": len(runs), "gold_answers": len(subs)}


def _tally_markdown(mismatches: dict) -> str:
    if not mismatches:
        return ""
    lines = ["## Tally cross-check", "", "| grader | variant | mismatches | graded |", "|---|---|---|---|"]
    for (grader, variant), (bad, n) in sorted(mismatches.items()):
        lines.append(f"| {grader} | {variant} | {bad} | {n} |")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# prefs
# --------------------------------------------------------------------------


def _reference_grader(cfg: RunConfig, present: list) -> str:
    ref = cfg.mcmc.get("reference")
    if ref:
        if ref not in present:
            raise DataError(f"reference grader {ref!r} has no ratings")
        return ref
    graders = load_graders(cfg.get("graders"))
    for g in graders:
        if g.kind is GraderKind.HUMAN and g.grader_id in present:
            return g.grader_id
    raise DataError("no human grader with ratings to use as reference; set mcmc.reference")


def run_prefs(cfg: RunConfig) -> dict:
    """Fit the ordered-probit preference model and write draws, contrasts and diagnostics."""
    if cfg.get("ratings") is None:
        raise DataError("preference analysis needs 'ratings' in the config")
    levels = int(cfg.mcmc["levels"])
    ratings = load_ratings(cfg.get("ratings"), levels)
    if not ratings:
        raise DataError("ratings file is empty")
    present = {r.grader_id for r in ratings}
    configured = [g.grader_id for g in load_graders(cfg.get("graders"))]
    order = [g for g in configured if g in present] + sorted(present - set(configured))
    reference = _reference_grader(cfg, order)
    data = RatingData(ratings, levels, graders=order)
    mc = cfg.mcmc
    sconf = SamplerConfig(
        iterations=int(mc["iterations"]), warmup=int(mc["warmup"]), chains=int(mc["chains"]),
        seed=cfg.seeds["mcmc"], sampler=mc["sampler"], leapfrog_steps=int(mc["leapfrog_steps"]), metric=mc["metric"],
    )
    prior_sd = float(mc.get("prior_sd", 2.0))
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance
    model = OrderedProbitModel(data, split=False, prior_sd=prior_sd)
    draws = sample_posterior(model, sconf)
    summaries = contrasts_vs_reference(draws, model, reference)
    write_posterior_csv(draws, out / "posterior.csv", prov)
    diag = diagnostics_text(draws, prov)
    warnings = list(draws.warnings)
    if mc.get("split"):
        split_model = OrderedProbitModel(data, split=True, prior_sd=prior_sd, hyper_sd=float(mc.get("hyper_sd", 1.0)))
        split_draws = sample_posterior(split_model, replace(sconf, seed=derive_seed(sconf.seed, "split")))
        summaries += contrasts_vs_reference(split_draws, split_model, reference)
        write_posterior_csv(split_draws, out / "posterior_split.csv", prov)
        diag += "\n# split model\n" + diagnostics_text(split_draws, prov)
        warnings += [f"split model: {w}" for w in split_draws.warnings]
    write_contrasts_csv(summaries, out / "contrasts.csv", reference, prov)
    (out / "diagnostics.txt").write_text(diag, encoding="utf-8")
    return {"reference": reference, "ratings": len(ratings), "warnings": warnings}


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

SECTIONS = (
    ("grading status", GRADES_FILE),
    ("evaluation", "report.csv"),
    ("feedback length", "feedback_lengths.csv"),
    ("grader contrasts", "contrasts.csv"),
    ("sampler diagnostics", "diagnostics.txt"),
)


def _status_markdown(path: Path) -> list[str]:
    latest = latest_records(GradeStore(path).records())
    by_grader: dict[str, Counter] = {}
    for rec in latest.values():
        by_grader.setdefault(rec.grader_id, Counter())[rec.status.value] += 1
    statuses = [s.value for s in Status]
    lines = ["## Grading status", "", "| grader | " + " | ".join(statuses) + " |", "|---" * (len(statuses) + 1) + "|"]
    for grader in sorted(by_grader):
        lines.append(f"| {grader} | " + " | ".join(str(by_grader[grader][s]) for s in statuses) + " |")
    flags = Counter(f for r in latest.values() for f in r.flags)
    if flags:
        lines += ["", "Flags: " + ", ".join(f"{k} ({v})" for k, v in sorted(flags.items()))]
    return lines + [""]


def _contrast_markdown(path: Path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ref = rows[0]["reference"] if rows else ""
    lines = [
        f"## Grader contrasts against `{ref}` (posterior mean, 95% interval)",
        "",
        "| grader | answers | contrast | shift in P(higher rating) | shift in P(lower rating) |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        cells = [
            f"{float(r['mean']):+.3f} [{float(r['low']):+.3f}, {float(r['high']):+.3f}]",
            f"{float(r['p_higher']):+.3f} [{float(r['p_higher_low']):+.3f}, {float(r['p_higher_high']):+.3f}]",
            f"{float(r['p_lower']):+.3f} [{float(r['p_lower_low']):+.3f}, {float(r['p_lower_high']):+.3f}]",
        ]
        lines.append(f"| {r['grader']} | {r['group']} | " + " | ".join(cells) + " |")
    return lines + [""]


def run_report(cfg: RunConfig) -> dict:
    """Merge whatever artifacts exist into ``report.md``; missing ones are listed."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    prov = cfg.provenance
    lines = ["# Study summary", "", f"Config hash `{prov['config_hash']}`; seeds {prov['seeds_text']}.", ""]
    present = {name: (out / fname).exists() for name, fname in SECTIONS}
    if present["grading status"]:
        lines += _status_markdown(out / GRADES_FILE)
    if present["evaluation"]:
        reports = read_report_csv(out / "report.csv")
        lengths = read_feedback_lengths_csv(out / "feedback_lengths.csv") if present["feedback length"] else ()
        lines += [report_markdown(reports, lengths, level=2)]
    if present["grader contrasts"]:
        lines += _contrast_markdown(out / "contrasts.csv")
    if present["sampler diagnostics"]:
        text = (out / "diagnostics.txt").read_text(encoding="utf-8")
        keep = [ln for ln in text.splitlines() if ln and not ln.startswith("  ") and not ln.startswith("parameter")]
        lines += ["## Sampler diagnostics", "", "```", *keep, "```", ""]
    missing = [name for name, ok in present.items() if not ok]
    if missing:
        lines += ["## Missing sections", ""]
        lines += [f"- {name}: `{fname}` not found" for name, fname in SECTIONS if name in missing]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines).rstrip() + "\n", encoding="utf-8")
    return {"missing": missing, "sections": [n for n, ok in present.items() if ok]}

