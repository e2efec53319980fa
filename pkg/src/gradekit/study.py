"""Blinded study orchestration: grader assignment, grading runs, regrades, exports.

Every text answer is assigned independently to one grader drawn according to
the configured weights.  LLM graders are called through the gateway; human
graders produce ``pending-human`` records that are completed later from
TA-entered grades.  The record store is append-only JSONL: the current state of
an answer is its latest line.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Exercise, HumanGrade, Submission
from .gateway import BackendConfig, Gateway, GatewayError
from .prompts import (
    ExercisePacket,
    GradedExample,
    PromptVariant,
    ReconciledGrade,
    ResponseError,
    TemplateSet,
    crosscheck_tally,
    injection_flags,
    parse_response,
    render,
    render_tone_revision,
)
from .rubric import RubricError, evaluate, format_score
from .sampler import MAX_EXAMPLES, group_by_signature, sample_groups
from .seeding import derive_seed, rng

log = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-9


class GraderKind(str, enum.Enum):
    LLM = "llm"
    HUMAN = "human"
    REVISED = "human-llm-revised"


class Status(str, enum.Enum):
    AUTO = "auto-graded"
    PENDING = "pending-human"
    HUMAN = "human-graded"
    REGRADE_REQUESTED = "regrade-requested"
    REGRADED = "regraded"


INCOMPLETE = frozenset({Status.PENDING, Status.REGRADE_REQUESTED})


class StudyError(ValueError):
    pass


class ExportRefused(StudyError):
    def __init__(self, answer_ids: Sequence[str]):
        self.answer_ids = list(answer_ids)
        listing = ", ".join(self.answer_ids[:20]) + (" ..." if len(self.answer_ids) > 20 else "")
        super().__init__(f"{len(self.answer_ids)} answer(s) are not finally graded: {listing}")


@dataclass(frozen=True)
class GraderSpec:
    grader_id: str
    kind: GraderKind
    assignment_weight: Fraction
    backend: Optional[BackendConfig] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GraderKind(self.kind))
        if self.kind in (GraderKind.LLM, GraderKind.REVISED) and self.backend is None:
            raise StudyError(f"grader {self.grader_id} ({self.kind.value}) needs a backend")
        if self.assignment_weight < 0:
            raise StudyError(f"grader {self.grader_id} has a negative weight")

    @classmethod
    def from_dict(cls, doc: dict) -> "GraderSpec":
        backend = BackendConfig.from_dict(doc["backend"]) if doc.get("backend") else None
        return cls(
            grader_id=str(doc["grader_id"]),
            kind=GraderKind(doc["kind"]),
            assignment_weight=Fraction(Decimal(str(doc.get("weight", doc.get("assignment_weight", 0))))),
            backend=backend,
        )

    @property
    def model_name(self) -> Optional[str]:
        return self.backend.model_name if self.backend else None


def check_weights(graders: Sequence[GraderSpec]) -> None:
    ids = [g.grader_id for g in graders]
    if len(set(ids)) != len(ids):
        raise StudyError("grader ids must be unique")
    total = sum(float(g.assignment_weight) for g in graders)
    if not graders or abs(total - 1.0) > WEIGHT_TOLERANCE:
        raise StudyError(f"grader weights sum to {total}, expected 1")


def load_graders(path) -> list[GraderSpec]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = doc.get("graders", [])
    graders = [GraderSpec.from_dict(d) for d in doc]
    check_weights(graders)
    return graders


@dataclass(frozen=True)
class AssignmentPlan:
    mapping: dict
    seed: int
    weights: dict

    def to_dict(self) -> dict:
        return {"seed": self.seed, "weights": self.weights, "mapping": self.mapping}

    @classmethod
    def from_dict(cls, doc: dict) -> "AssignmentPlan":
        return cls(dict(doc["mapping"]), int(doc["seed"]), dict(doc["weights"]))

    def shares(self) -> dict[str, float]:
        n = len(self.mapping)
        counts: dict[str, int] = {g: 0 for g in self.weights}
        for g in self.mapping.values():
            counts[g] += 1
        return {g: c / n for g, c in counts.items()} if n else {}


def assign(
    answer_ids: Sequence[str],
    graders: Sequence[GraderSpec],
    seed: int,
    consent: Optional[dict] = None,
) -> AssignmentPlan:
    """Draw one grader per answer independently, with probabilities equal to the weights.

    Answers whose student withheld consent (``consent[answer_id] is False``) go
    to the first human grader regardless of the draw.
    """
    check_weights(graders)
    weights = np.array([float(g.assignment_weight) for g in graders])
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    u = rng(seed).random(len(answer_ids))
    picks = np.searchsorted(cdf, u, side="right")
    humans = [g for g in graders if g.kind is GraderKind.HUMAN]
    mapping = {}
    for answer_id, pick in zip(answer_ids, picks):
        if consent is not None and consent.get(answer_id) is False:
            if not humans:
                raise StudyError("non-consenting answers need a human grader")
            mapping[answer_id] = humans[0].grader_id
        else:
            mapping[answer_id] = graders[min(int(pick), len(graders) - 1)].grader_id
    return AssignmentPlan(mapping, int(seed), {g.grader_id: format_score(g.assignment_weight) for g in graders})


# --------------------------------------------------------------------------
# Records and store
# --------------------------------------------------------------------------


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class GradeRecord:
    answer_id: str
    student_id: str
    exercise_id: str
    grader_id: str
    status: Status
    reconciled: Optional[ReconciledGrade] = None
    human: Optional[dict] = None
    error: Optional[str] = None
    flags: tuple = ()
    variant: Optional[str] = None
    timestamps: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def final_score(self) -> Optional[Fraction]:
        if self.human is not None:
            return Fraction(Decimal(self.human["score"]))
        if self.reconciled is not None and self.status is Status.AUTO:
            return self.reconciled.final_score
        if self.reconciled is not None and self.status is Status.REGRADE_REQUESTED:
            return self.reconciled.final_score
        return None

    @property
    def final_feedback(self) -> Optional[str]:
        if self.human is not None:
            return self.human["feedback"]
        if self.reconciled is not None:
            return self.reconciled.response.feedback
        return None

    @property
    def satisfied(self) -> Optional[frozenset]:
        if self.human is not None:
            return frozenset(self.human["satisfied"])
        if self.reconciled is not None:
            return self.reconciled.response.satisfied
        return None

    def to_dict(self) -> dict:
        return {
            "answer_id": self.answer_id,
            "student_id": self.student_id,
            "exercise_id": self.exercise_id,
            "grader_id": self.grader_id,
            "status": self.status.value,
            "variant": self.variant,
            "reconciled": self.reconciled.to_dict() if self.reconciled else None,
            "human": self.human,
            "error": self.error,
            "flags": list(self.flags),
            "timestamps": self.timestamps,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GradeRecord":
        return cls(
            answer_id=doc["answer_id"],
            student_id=doc["student_id"],
            exercise_id=doc["exercise_id"],
            grader_id=doc["grader_id"],
            status=Status(doc["status"]),
            reconciled=ReconciledGrade.from_dict(doc["reconciled"]) if doc.get("reconciled") else None,
            human=doc.get("human"),
            error=doc.get("error"),
            flags=tuple(doc.get("flags") or ()),
            variant=doc.get("variant"),
            timestamps=dict(doc.get("timestamps") or {}),
            provenance=dict(doc.get("provenance") or {}),
        )


class GradeStore:
    """Append-only JSONL store of grade records."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._latest: Optional[dict[str, GradeRecord]] = None

    def append(self, record: GradeRecord) -> None:
        line = json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
            if self._latest is not None:
                self._latest[record.answer_id] = record

    def records(self) -> list[GradeRecord]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [GradeRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def latest(self) -> dict[str, GradeRecord]:
        """Current record per answer; cached after the first read."""
        with self._lock:
            if self._latest is None:
                self._latest = latest_records(self.records())
            return dict(self._latest)


def latest_records(records: Iterable[GradeRecord]) -> dict[str, GradeRecord]:
    out: dict[str, GradeRecord] = {}
    for rec in records:
        out[rec.answer_id] = rec
    return out


# --------------------------------------------------------------------------
# Grading
# --------------------------------------------------------------------------


def select_examples(
    examples: Sequence[GradedExample], k: int, seed: int, exercise_id: str, answer_id: Optional[str] = None
) -> list[GradedExample]:
    parts = ("examples", exercise_id) if answer_id is None else ("examples", exercise_id, answer_id)
    return sample_groups(group_by_signature(examples), min(k, MAX_EXAMPLES), derive_seed(seed, *parts))


def grade_with_llm(
    submission: Submission,
    exercise: Exercise,
    examples: Sequence[GradedExample],
    grader: GraderSpec,
    variant: PromptVariant,
    gateway: Gateway,
    templates: TemplateSet,
) -> ReconciledGrade:
    packet = ExercisePacket(
        question=exercise.question,
        reference_answer=exercise.reference_answer,
        rubric=exercise.rubric,
        submission=submission.text,
        submission_id=submission.answer_id,
        examples=tuple(examples),
    )
    bundle = render(packet, variant, templates)
    raw = gateway.complete(bundle, grader.backend)
    response = parse_response(raw, exercise.rubric)
    return crosscheck_tally(response, exercise.rubric)


def run_grading(
    plan: AssignmentPlan,
    course: dict[str, Exercise],
    submissions: Sequence[Submission],
    graders: Sequence[GraderSpec],
    variant: PromptVariant,
    seed: int,
    gateway: Gateway,
    templates: TemplateSet,
    examples: Optional[dict[str, list[GradedExample]]] = None,
    store: Optional[GradeStore] = None,
    example_count: int = MAX_EXAMPLES,
    resample_per_submission: bool = False,
    provenance: Optional[dict] = None,
) -> list[GradeRecord]:
    """Grade every planned answer; failures fall back to ``pending-human``.

    ``seed`` drives example sampling.  Records are produced (and appended to
    ``store``) in ``answer_id`` order regardless of completion order.
    """
    variant = PromptVariant(variant)
    examples = examples or {}
    by_id = {g.grader_id: g for g in graders}
    fixed_examples = {
        ex_id: select_examples(examples.get(ex_id, []), example_count, seed, ex_id) for ex_id in course
    }
    ordered = sorted(submissions, key=lambda s: s.answer_id)
    missing = [s.answer_id for s in ordered if s.answer_id not in plan.mapping]
    if missing:
        raise StudyError(f"answers missing from the assignment plan: {', '.join(missing[:10])}")

    def one(sub: Submission) -> GradeRecord:
        grader = by_id[plan.mapping[sub.answer_id]]
        base = GradeRecord(
            answer_id=sub.answer_id,
            student_id=sub.student_id,
            exercise_id=sub.exercise_id,
            grader_id=grader.grader_id,
            status=Status.PENDING,
            variant=variant.value,
            flags=tuple(injection_flags(sub.text)),
            timestamps={"created": _now()},
            provenance=dict(provenance or {}),
        )
        if grader.kind is not GraderKind.LLM:
            return base
        if resample_per_submission:
            chosen = select_examples(examples.get(sub.exercise_id, []), example_count, seed, sub.exercise_id, sub.answer_id)
        else:
            chosen = fixed_examples[sub.exercise_id]
        try:
            reconciled = grade_with_llm(sub, course[sub.exercise_id], chosen, grader, variant, gateway, templates)
        except (GatewayError, ResponseError, RubricError, ValueError) as exc:
            log.warning("answer %s falls back to human grading: %s", sub.answer_id, exc)
            return replace(base, error=f"{type(exc).__name__}: {exc}")
        flags = base.flags + (("tally-mismatch",) if reconciled.tally_mismatch else ())
        return replace(base, status=Status.AUTO, reconciled=reconciled, flags=flags)

    with ThreadPoolExecutor(max_workers=gateway.max_in_flight) as pool:
        records = list(pool.map(one, ordered))
    if store is not None:
        for rec in records:
            store.append(rec)
    return records


def apply_human_grade(
    store: GradeStore,
    grade: HumanGrade,
    course: dict[str, Exercise],
    graders: Sequence[GraderSpec],
    gateway: Optional[Gateway] = None,
    templates: Optional[TemplateSet] = None,
    review_revised: bool = False,
) -> GradeRecord:
    """Complete a pending or regrade-requested answer with a TA-entered grade.

    For the human-llm-revised group the TA feedback is tone-revised first; the
    score always comes from the TA's satisfied criteria.
    """
    current = store.latest().get(grade.answer_id)
    if current is None:
        raise StudyError(f"unknown answer {grade.answer_id}")
    if current.status not in INCOMPLETE:
        raise StudyError(f"answer {grade.answer_id} is {current.status.value}; nothing to grade")
    rubric = course[current.exercise_id].rubric
    score = evaluate(rubric, grade.satisfied)
    feedback = grade.feedback
    flags = current.flags
    grader = {g.grader_id: g for g in graders}[current.grader_id]
    if current.status is Status.PENDING and grader.kind is GraderKind.REVISED:
        if gateway is None or templates is None:
            raise StudyError("tone revision needs a gateway and templates")
        try:
            feedback = gateway.complete(render_tone_revision(grade.feedback, templates), grader.backend).strip()
        except GatewayError as exc:
            log.warning("tone revision failed for %s, releasing TA feedback: %s", grade.answer_id, exc)
            flags = flags + ("tone-revision-failed",)
        if review_revised:
            flags = flags + ("revision-needs-review",)
    status = Status.REGRADED if current.status is Status.REGRADE_REQUESTED else Status.HUMAN
    record = replace(
        current,
        status=status,
        human={
            "satisfied": sorted(grade.satisfied),
            "score": format_score(score),
            "feedback": feedback,
            "ta_feedback": grade.feedback,
        },
        flags=flags,
        timestamps={**current.timestamps, "human": _now()},
    )
    store.append(record)
    return record


def request_regrade(store: GradeStore, answer_id: str) -> GradeRecord:
    """Mark an auto-graded answer for human review; repeated requests are no-ops."""
    current = store.latest().get(answer_id)
    if current is None:
        raise StudyError(f"unknown answer {answer_id}")
    if current.status is Status.REGRADE_REQUESTED:
        return current
    if current.status is not Status.AUTO:
        raise StudyError(f"answer {answer_id} is {current.status.value}; only auto-graded answers can be regraded")
    record = replace(current, status=Status.REGRADE_REQUESTED, timestamps={**current.timestamps, "regrade_requested": _now()})
    store.append(record)
    return record


# --------------------------------------------------------------------------
# Student-facing export
# --------------------------------------------------------------------------


def _redact(text: str, terms: Iterable[str]) -> str:
    for term in sorted({t for t in terms if t}, key=len, reverse=True):
        text = re.sub(r"(?<![\w-])" + re.escape(term) + r"(?![\w-])", "[grader]", text, flags=re.I)
    return text


def identity_terms(graders: Sequence[GraderSpec]) -> set[str]:
    """Grader ids and model names that must never reach a student."""
    terms = set()
    for g in graders:
        terms.add(g.grader_id)
        if g.model_name:
            terms.add(g.model_name)
    return terms


def export_student_view(
    records: Iterable[GradeRecord],
    course: dict[str, Exercise],
    graders: Sequence[GraderSpec] = (),
    provenance: Optional[dict] = None,
) -> dict[str, str]:
    """One markdown feedback document per student, free of grader identity."""
    latest = latest_records(records)
    incomplete = sorted(a for a, r in latest.items() if r.status in INCOMPLETE)
    if incomplete:
        raise ExportRefused(incomplete)
    terms = identity_terms(graders)
    order = {ex_id: i for i, ex_id in enumerate(course)}
    by_student: dict[str, list[GradeRecord]] = {}
    for rec in latest.values():
        by_student.setdefault(rec.student_id, []).append(rec)
    docs = {}
    for student_id in sorted(by_student):
        recs = sorted(by_student[student_id], key=lambda r: (order.get(r.exercise_id, 1 << 30), r.answer_id))
        lines = [f"# Feedback for student {student_id}", ""]
        for rec in recs:
            exercise = course[rec.exercise_id]
            lines.append(f"## Exercise {rec.exercise_id}")
            lines.append("")
            lines.append(f"> {' '.join(exercise.question.split())}")
            lines.append("")
            lines.append(f"**Score:** {format_score(rec.final_score)}")
            lines.append("")
            lines.append(_redact(rec.final_feedback or "", terms).strip())
            lines.append("")
        if provenance and provenance.get("config_hash"):
            lines.append(f"<!-- run {provenance['config_hash']} -->")
        docs[student_id] = "\n".join(lines).rstrip() + "\n"
    return docs


def write_exports(docs: dict[str, str], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for student_id, text in docs.items():
        path = directory / f"{student_id}.md"
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
