"""Criteria-level comparison of grader output against TA gold labels.

Every (answer, criterion) pair is a binary classification outcome.  The
harness reports classification accuracy (CA), the signed per-answer grading
difference (positive = more lenient than the TA), its spread, percentile
bootstrap intervals, and feedback-length summaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import _kernels
from .data import DIFFICULTIES, Exercise
from .rubric import evaluate
from .seeding import derive_seed, rng

DEFAULT_RESAMPLES = 2000
ALL = "all"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class CriterionOutcome:
    answer_id: str
    exercise_id: str
    label: str
    gold: bool
    predicted: bool


@dataclass
class OutcomeSet:
    outcomes: list
    missing_gold: list
    missing_predicted: list

    @property
    def complete(self) -> bool:
        return not self.missing_gold and not self.missing_predicted


def criterion_outcomes(
    gold: Mapping[str, frozenset],
    predicted: Mapping[str, frozenset],
    answer_exercise: Mapping[str, str],
    course: Mapping[str, Exercise],
) -> OutcomeSet:
    """One outcome per (answer, rubric criterion) for answers present on both sides.

    Answers present on only one side are listed in the result instead of being
    dropped silently.
    """
    missing_pred = sorted(set(gold) - set(predicted))
    missing_gold = sorted(set(predicted) - set(gold))
    outcomes = []
    for answer_id in sorted(set(gold) & set(predicted)):
        exercise_id = answer_exercise[answer_id]
        g, p = gold[answer_id], predicted[answer_id]
        for label in course[exercise_id].rubric.labels:
            outcomes.append(CriterionOutcome(answer_id, exercise_id, label, label in g, label in p))
    return OutcomeSet(outcomes, missing_gold, missing_pred)


def classification_accuracy(outcomes: Sequence[CriterionOutcome]) -> float:
    if not outcomes:
        raise EvaluationError("classification accuracy of an empty outcome list")
    agree = sum(1 for o in outcomes if o.gold == o.predicted)
    return float(Fraction(agree, len(outcomes)))


@dataclass(frozen=True)
class AnswerDifference:
    answer_id: str
    exercise_id: str
    n_criteria: int
    count: int
    fraction: Fraction


def answer_differences(outcomes: Sequence[CriterionOutcome]) -> list[AnswerDifference]:
    """Signed (predicted - gold) satisfied counts per answer, raw and per criterion."""
    groups: dict[str, list[CriterionOutcome]] = {}
    for o in outcomes:
        groups.setdefault(o.answer_id, []).append(o)
    out = []
    for answer_id, group in groups.items():
        diff = sum(int(o.predicted) for o in group) - sum(int(o.gold) for o in group)
        out.append(AnswerDifference(answer_id, group[0].exercise_id, len(group), diff, Fraction(diff, len(group))))
    return out


def _mean_std(values: Sequence[Fraction]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values, Fraction(0)) / n
    var = sum(((v - mean) ** 2 for v in values), Fraction(0)) / n
    return float(mean), math.sqrt(var)


def grading_difference(outcomes: Sequence[CriterionOutcome], raw: bool = False) -> tuple[float, float]:
    """Mean and (population) standard deviation of the per-answer grading difference.

    With ``raw=False`` each answer contributes (predicted - gold) / criteria,
    bounded to [-1, 1]; ``raw=True`` uses the plain count difference.
    """
    diffs = answer_differences(outcomes)
    if not diffs:
        raise EvaluationError("grading difference of an empty outcome list")
    return _mean_std([Fraction(d.count) if raw else d.fraction for d in diffs])


Statistic = Union[str, Callable[[np.ndarray], float]]
_STAT_CODES = {"mean": _kernels.STAT_MEAN, "std": _kernels.STAT_STD}


def bootstrap_distribution(statistic: Statistic, data, resamples: int, seed: int, chunk: int = 256) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    gen = rng(seed)
    out = np.empty(resamples)
    for start in range(0, resamples, chunk):
        stop = min(resamples, start + chunk)
        idx = gen.integers(0, n, size=(stop - start, n))
        if isinstance(statistic, str):
            out[start:stop] = _kernels.bootstrap_stat(data, idx, _STAT_CODES[statistic])
        else:
            out[start:stop] = [statistic(data[row]) for row in idx]
    return out


def bootstrap_ci(
    statistic: Statistic,
    data,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval; endpoints are order statistics of the resampled values."""
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise EvaluationError("bootstrap of empty data")
    if resamples < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    if isinstance(statistic, str) and statistic not in _STAT_CODES:
        raise ValueError(f"unknown statistic {statistic!r}")
    dist = bootstrap_distribution(statistic, data, resamples, seed)
    alpha = 1.0 - level
    lo, hi = np.quantile(dist, [alpha / 2, 1 - alpha / 2], method="inverted_cdf")
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    grader: str
    variant: str
    difficulty: str
    n_answers: int
    n_outcomes: int
    ca: Optional[float] = None
    ca_low: Optional[float] = None
    ca_high: Optional[float] = None
    mean_diff: Optional[float] = None
    mean_diff_low: Optional[float] = None
    mean_diff_high: Optional[float] = None
    std_diff: Optional[float] = None
    std_diff_low: Optional[float] = None
    std_diff_high: Optional[float] = None
    mean_diff_count: Optional[float] = None
    std_diff_count: Optional[float] = None

    @property
    def key(self) -> tuple:
        return (self.grader, self.variant, self.difficulty)


def metric_report(
    outcomes: Sequence[CriterionOutcome],
    grader: str,
    variant: str,
    difficulty: str,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> MetricReport:
    diffs = answer_differences(outcomes)
    report = MetricReport(grader, variant, difficulty, len(diffs), len(outcomes))
    if not outcomes:
        return report
    report.ca = classification_accuracy(outcomes)
    report.mean_diff, report.std_diff = grading_difference(outcomes)
    report.mean_diff_count, report.std_diff_count = grading_difference(outcomes, raw=True)
    correct = np.array([o.gold == o.predicted for o in outcomes], dtype=float)
    fractions = np.array([float(d.fraction) for d in diffs])
    cell = (grader, variant, difficulty)
    report.ca_low, report.ca_high = bootstrap_ci("mean", correct, resamples, derive_seed(seed, *cell, "ca"))
    report.mean_diff_low, report.mean_diff_high = bootstrap_ci("mean", fractions, resamples, derive_seed(seed, *cell, "mean"))
    report.std_diff_low, report.std_diff_high = bootstrap_ci("std", fractions, resamples, derive_seed(seed, *cell, "std"))
    return report


def difficulty_of(course: Mapping[str, Exercise]) -> dict[str, str]:
    return {ex_id: ex.difficulty for ex_id, ex in course.items()}


def grouped_reports(
    runs: Mapping[tuple, Mapping[str, frozenset]],
    gold: Mapping[str, frozenset],
    answer_exercise: Mapping[str, str],
    course: Mapping[str, Exercise],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    include_all: bool = True,
) -> list[MetricReport]:
    """Reports for each ``(grader, variant)`` run, per difficulty plus an overall row.

    Every difficulty category is emitted, empty ones with ``n_answers == 0``.
    """
    difficulty = difficulty_of(course)
    reports = []
    for grader, variant in sorted(runs):
        outcome_set = criterion_outcomes(gold, runs[(grader, variant)], answer_exercise, course)
        cells = {d: [] for d in DIFFICULTIES}
        for o in outcome_set.outcomes:
            cells[difficulty[o.exercise_id]].append(o)
        for d in DIFFICULTIES:
            reports.append(metric_report(cells[d], grader, variant, d, resamples, seed))
        if include_all:
            reports.append(metric_report(outcome_set.outcomes, grader, variant, ALL, resamples, seed))
    return reports


def ablation_report(
    runs: Mapping[str, Mapping[str, frozenset]],
    gold: Mapping[str, frozenset],
    answer_exercise: Mapping[str, str],
    course: Mapping[str, Exercise],
    grader: str = "",
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> list[MetricReport]:
    """Variant x difficulty grid for one grader; runs must cover identical answers."""
    answer_sets = {variant: frozenset(pred) for variant, pred in runs.items()}
    if len(set(answer_sets.values())) > 1:
        raise EvaluationError("prompt-variant runs cover different answer sets")
    return grouped_reports(
        {(grader, variant): pred for variant, pred in runs.items()},
        gold,
        answer_exercise,
        course,
        resamples,
        seed,
        include_all=False,
    )


def gold_correctness(
    gold: Mapping[str, frozenset], answer_exercise: Mapping[str, str], course: Mapping[str, Exercise]
) -> dict[str, bool]:
    """An answer is correct when its gold score equals 1."""
    return {a: evaluate(course[answer_exercise[a]].rubric, s) == 1 for a, s in gold.items()}


@dataclass(frozen=True)
class FeedbackLengthRow:
    grader: str
    correct: bool
    n: int
    mean_chars: float
    mean_words: float


def feedback_length_stats(feedback: Iterable[tuple[str, str, str]], correctness: Mapping[str, bool]) -> list[FeedbackLengthRow]:
    """Mean feedback length per (grader, correct) cell.

    ``feedback`` yields ``(answer_id, grader, text)``; answers without a gold
    correctness value are skipped.
    """
    cells: dict[tuple, list[str]] = {}
    for answer_id, grader, text in feedback:
        if answer_id not in correctness:
            continue
        cells.setdefault((grader, correctness[answer_id]), []).append(text)
    rows = []
    for (grader, correct), texts in sorted(cells.items()):
        chars = sum(len(t) for t in texts) / len(texts)
        words = sum(len(t.split()) for t in texts) / len(texts)
        rows.append(FeedbackLengthRow(grader, correct, len(texts), chars, words))
    return rows


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report_csv(reports: Sequence[MetricReport], path, provenance: Optional[dict] = None) -> None:
    names = [f.name for f in fields(MetricReport)]
    extra = ["config_hash", "seeds"] if provenance else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + extra)
        for r in reports:
            row = [_fmt(v) for v in asdict(r).values()]
            if provenance:
                row += [provenance.get("config_hash", ""), provenance.get("seeds_text", "")]
            writer.writerow(row)


def _ci(point, lo, hi, pct: bool = False) -> str:
    if point is None:
        return "-"
    if pct:
        return f"{100 * point:.1f}% [{100 * lo:.1f}, {100 * hi:.1f}]"
    return f"{point:+.3f} [{lo:+.3f}, {hi:+.3f}]"


def report_markdown(
    reports: Sequence[MetricReport],
    lengths: Sequence[FeedbackLengthRow] = (),
    provenance: Optional[dict] = None,
    level: int = 1,
) -> str:
    """Markdown tables per prompt variant; ``level`` sets the top heading depth."""
    top, sub = "#" * level, "#" * (level + 1)
    lines = [f"{top} Grading evaluation", ""]
    if provenance:
        lines += [f"Config hash `{provenance.get('config_hash', '')}`; seeds {provenance.get('seeds_text', '')}.", ""]
    variants = sorted({r.variant for r in reports})
    columns = list(DIFFICULTIES) + [ALL]
    for title, attr in (
        ("Classification accuracy (95% bootstrap CI)", "ca"),
        ("Mean grading difference (positive = lenient)", "mean_diff"),
        ("Standard deviation of grading difference", "std_diff"),
    ):
        for variant in variants:
            lines += [f"{sub} {title}, prompt variant `{variant}`", ""]
            lines.append("| grader | " + " | ".join(columns) + " |")
            lines.append("|---" * (len(columns) + 1) + "|")
            rows: dict[str, dict[str, MetricReport]] = {}
            for r in reports:
                if r.variant == variant:
                    rows.setdefault(r.grader, {})[r.difficulty] = r
            for grader in sorted(rows):
                cells = []
                for d in columns:
                    r = rows[grader].get(d)
                    if r is None or r.ca is None:
                        cells.append("-")
                    else:
                        cells.append(
                            _ci(getattr(r, attr), getattr(r, f"{attr}_low"), getattr(r, f"{attr}_high"), attr == "ca")
                        )
                lines.append(f"| {grader} | " + " | ".join(cells) + " |")
            lines.append("")
    if lengths:
        lines += [f"{sub} Mean feedback length", "", "| grader | answers | n | characters | words |", "|---|---|---|---|---|"]
        for row in lengths:
            label = "correct" if row.correct else "incorrect/partial"
            lines.append(f"| {row.grader} | {label} | {row.n} | {row.mean_chars:.1f} | {row.mean_words:.1f} |")
        lines.append("")
    return "\n".join(lines)


def read_report_csv(path) -> list[MetricReport]:
    """Inverse of :func:`write_report_csv` (provenance columns are dropped)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            values = {}
            for name in (f.name for f in fields(MetricReport)):
                raw = row.get(name, "")
                if name in ("grader", "variant", "difficulty"):
                    values[name] = raw
                elif name in ("n_answers", "n_outcomes"):
                    values[name] = int(raw)
                else:
                    values[name] = float(raw) if raw != "" else None
            out.append(MetricReport(**values))
    return out


def write_feedback_lengths_csv(rows: Sequence[FeedbackLengthRow], path, provenance: Optional[dict] = None) -> None:
    names = [f.name for f in fields(FeedbackLengthRow)]
    extra = ["config_hash", "seeds"] if provenance else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + extra)
        for r in rows:
            row = [r.grader, int(r.correct), r.n, f"{r.mean_chars:.4f}", f"{r.mean_words:.4f}"]
            if provenance:
                row += [provenance.get("config_hash", ""), provenance.get("seeds_text", "")]
            writer.writerow(row)


def read_feedback_lengths_csv(path) -> list[FeedbackLengthRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            FeedbackLengthRow(r["grader"], r["correct"] == "1", int(r["n"]), float(r["mean_chars"]), float(r["mean_words"]))
            for r in csv.DictReader(fh)
        ]
