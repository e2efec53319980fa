"""Loaders for the course, submission, example, gold and human-grade files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .prompts import GradedExample
from .rubric import Rubric, RubricError, evaluate, load_rubric

DIFFICULTIES = ("trivial", "easy", "medium", "hard", "open-ended")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Exercise:
    exercise_id: str
    question: str
    reference_answer: str
    difficulty: str
    rubric: Rubric


@dataclass(frozen=True)
class Submission:
    answer_id: str
    student_id: str
    exercise_id: str
    text: str
    consent: bool = True


@dataclass(frozen=True)
class HumanGrade:
    answer_id: str
    satisfied: frozenset
    feedback: str


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line, parse_float=Decimal)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _require(doc: dict, keys, where: str) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise DataError(f"{where}: missing field(s) {', '.join(missing)}")


def load_course(path, errors: Optional[list] = None) -> dict[str, Exercise]:
    """Exercises keyed by id, in file order; rubric paths resolve relative to the course file.

    With an ``errors`` list, per-exercise problems are appended to it and the
    exercise skipped instead of raising.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    course = {}
    for i, ex in enumerate(doc.get("exercises", [])):
        try:
            exercise = _load_exercise(path, ex, i)
            if exercise.exercise_id in course:
                raise DataError(f"duplicate exercise id {exercise.exercise_id}")
        except DataError as exc:
            if errors is None:
                raise
            errors.append(str(exc))
            continue
        course[exercise.exercise_id] = exercise
    if not course and not errors:
        raise DataError(f"{path}: no exercises")
    return course


def _load_exercise(path: Path, ex: dict, i: int) -> Exercise:
    _require(ex, ("id", "question", "reference_answer", "difficulty", "rubric"), f"{path} exercise #{i + 1}")
    if ex["difficulty"] not in DIFFICULTIES:
        raise DataError(f"exercise {ex['id']}: unknown difficulty {ex['difficulty']!r}")
    try:
        rubric = load_rubric(path.parent / ex["rubric"])
    except RubricError as exc:
        raise DataError(f"exercise {ex['id']}: {exc}") from exc
    except FileNotFoundError:
        raise DataError(f"exercise {ex['id']}: rubric file {ex['rubric']} not found") from None
    if rubric.exercise_id != ex["id"]:
        raise DataError(f"exercise {ex['id']}: rubric belongs to {rubric.exercise_id}")
    return Exercise(ex["id"], ex["question"], ex["reference_answer"], ex["difficulty"], rubric)


def load_submissions(path, course: dict[str, Exercise]) -> list[Submission]:
    subs = []
    seen = set()
    for row in read_jsonl(path):
        _require(row, ("answer_id", "student_id", "exercise_id", "text"), str(path))
        if row["exercise_id"] not in course:
            raise DataError(f"answer {row['answer_id']}: unknown exercise {row['exercise_id']}")
        if row["answer_id"] in seen:
            raise DataError(f"duplicate answer id {row['answer_id']}")
        seen.add(row["answer_id"])
        subs.append(
            Submission(
                str(row["answer_id"]),
                str(row["student_id"]),
                row["exercise_id"],
                row["text"],
                bool(row.get("consent", True)),
            )
        )
    return subs


def _satisfied(values, rubric: Rubric, where: str) -> frozenset:
    labels = frozenset(str(v).strip().upper() for v in values)
    unknown = sorted(labels - set(rubric.labels))
    if unknown:
        raise DataError(f"{where}: unknown criterion {', '.join(unknown)}")
    return labels


def load_examples(path, course: dict[str, Exercise]) -> dict[str, list[GradedExample]]:
    """TA-graded examples per exercise; each score must match the rubric tally."""
    out: dict[str, list[GradedExample]] = {}
    for i, row in enumerate(read_jsonl(path), 1):
        _require(row, ("exercise_id", "text", "satisfied", "score", "feedback"), f"{path}:{i}")
        ex = course.get(row["exercise_id"])
        if ex is None:
            raise DataError(f"{path}:{i}: unknown exercise {row['exercise_id']}")
        satisfied = _satisfied(row["satisfied"], ex.rubric, f"{path}:{i}")
        score = Fraction(Decimal(str(row["score"])))
        expected = evaluate(ex.rubric, satisfied)
        if score != expected:
            raise DataError(f"{path}:{i}: score {row['score']} does not match rubric tally {float(expected)}")
        out.setdefault(ex.exercise_id, []).append(
            GradedExample(row["text"], satisfied, score, row["feedback"], ex.exercise_id)
        )
    return out


def load_gold(path, submissions: Iterable[Submission], course: dict[str, Exercise]) -> dict[str, frozenset]:
    by_id = {s.answer_id: s for s in submissions}
    gold = {}
    for row in read_jsonl(path):
        _require(row, ("answer_id", "satisfied"), str(path))
        sub = by_id.get(str(row["answer_id"]))
        if sub is None:
            raise DataError(f"gold label for unknown answer {row['answer_id']}")
        gold[sub.answer_id] = _satisfied(row["satisfied"], course[sub.exercise_id].rubric, f"gold {sub.answer_id}")
    return gold


def load_human_grades(path, submissions: Iterable[Submission], course: dict[str, Exercise]) -> dict[str, HumanGrade]:
    by_id = {s.answer_id: s for s in submissions}
    grades = {}
    for row in read_jsonl(path):
        _require(row, ("answer_id", "satisfied", "feedback"), str(path))
        sub = by_id.get(str(row["answer_id"]))
        if sub is None:
            raise DataError(f"human grade for unknown answer {row['answer_id']}")
        rubric = course[sub.exercise_id].rubric
        grades[sub.answer_id] = HumanGrade(
            sub.answer_id, _satisfied(row["satisfied"], rubric, f"human grade {sub.answer_id}"), row["feedback"]
        )
    return grades
