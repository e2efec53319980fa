"""Prompt assembly for grading calls and parsing of the grader's JSON reply."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .rubric import Rubric, evaluate, format_expression, format_fraction, format_score, raw_sum, validate

USER_PLACEHOLDERS = ("question", "reference_answer", "rubric", "examples", "submission")
TONE_PLACEHOLDERS = ("feedback",)
TALLY_TOLERANCE = Fraction(1, 10**6)

_PLACEHOLDER_RE = re.compile(r"\{\{\s*(\w+)\s*\}\}")
_TEMPLATE_FILES = {
    "system": "system.txt",
    "user": "user.txt",
    "tone_system": "tone_system.txt",
    "tone_user": "tone_user.txt",
}


class TemplateError(ValueError):
    pass


class ResponseError(ValueError):
    """Grader output that cannot be turned into a :class:`GradeResponse`."""


class NoJsonFound(ResponseError):
    pass


class MissingField(ResponseError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing field {name!r}")


class UnknownCriterion(ResponseError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"unknown criterion {label!r}")


class ScoreOutOfRange(ResponseError):
    pass


class PromptVariant(str, enum.Enum):
    RUBRIC_ONLY = "rubric"
    EXAMPLES_ONLY = "examples"
    RUBRIC_AND_EXAMPLES = "both"

    @property
    def uses_rubric(self) -> bool:
        return self is not PromptVariant.EXAMPLES_ONLY

    @property
    def uses_examples(self) -> bool:
        return self is not PromptVariant.RUBRIC_ONLY


@dataclass(frozen=True)
class GradedExample:
    text: str
    satisfied: frozenset
    score: Fraction
    feedback: str
    exercise_id: str = ""


@dataclass(frozen=True)
class ExercisePacket:
    question: str
    reference_answer: str
    rubric: Rubric
    submission: str
    submission_id: str = ""
    examples: tuple = ()


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str

    def messages(self) -> list[dict]:
        return [{"role": "system", "content": self.system}, {"role": "user", "content": self.user}]


@dataclass(frozen=True)
class GradeResponse:
    score: Fraction
    feedback: str
    satisfied: frozenset


@dataclass(frozen=True)
class ReconciledGrade:
    response: GradeResponse
    recomputed_score: Fraction
    tally_mismatch: bool
    final_score: Fraction

    def to_dict(self) -> dict:
        return {
            "reported_score": format_score(self.response.score),
            "recomputed_score": format_score(self.recomputed_score),
            "final_score": format_score(self.final_score),
            "tally_mismatch": self.tally_mismatch,
            "feedback": self.response.feedback,
            "satisfied": sorted(self.response.satisfied),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ReconciledGrade":
        response = GradeResponse(
            score=Fraction(Decimal(doc["reported_score"])),
            feedback=doc["feedback"],
            satisfied=frozenset(doc["satisfied"]),
        )
        return cls(
            response=response,
            recomputed_score=Fraction(Decimal(doc["recomputed_score"])),
            tally_mismatch=bool(doc["tally_mismatch"]),
            final_score=Fraction(Decimal(doc["final_score"])),
        )


# --------------------------------------------------------------------------
# Templates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TemplateSet:
    system: str
    user: str
    tone_system: str
    tone_user: str
    source: Optional[str] = field(default=None, compare=False)


def load_templates(directory=None) -> TemplateSet:
    """Load templates; files missing from ``directory`` fall back to the shipped defaults."""
    texts = {}
    pkg = resources.files("gradekit") / "templates"
    for key, name in _TEMPLATE_FILES.items():
        path = Path(directory) / name if directory is not None else None
        if path is not None and path.exists():
            texts[key] = path.read_text(encoding="utf-8")
        else:
            texts[key] = (pkg / name).read_text(encoding="utf-8")
    return TemplateSet(source=str(directory) if directory else None, **texts)


def _placeholders(text: str) -> list[str]:
    return _PLACEHOLDER_RE.findall(text)


def check_templates(templates: TemplateSet) -> list[str]:
    """Diagnostics for missing, repeated, unknown or misordered placeholders."""
    diags = []
    for name, text, required in (
        ("user", templates.user, USER_PLACEHOLDERS),
        ("tone_user", templates.tone_user, TONE_PLACEHOLDERS),
    ):
        found = _placeholders(text)
        for p in required:
            count = found.count(p)
            if count == 0:
                diags.append(f"{name} template: missing placeholder {{{{{p}}}}}")
            elif count > 1:
                diags.append(f"{name} template: placeholder {{{{{p}}}}} appears {count} times")
        for p in sorted(set(found) - set(required)):
            diags.append(f"{name} template: unknown placeholder {{{{{p}}}}}")
        order = [p for p in found if p in required]
        if not diags and order != list(required):
            diags.append(f"{name} template: placeholders must appear in the order {', '.join(required)}")
    for name, text in (("system", templates.system), ("tone_system", templates.tone_system)):
        if _placeholders(text):
            diags.append(f"{name} template must not contain placeholders")
        if not text.strip():
            diags.append(f"{name} template is empty")
    return diags


def _substitute(template: str, values: dict[str, str]) -> str:
    # drop the line (and one following blank line) of an empty section
    for key, value in values.items():
        if value == "":
            template = re.sub(r"^[ \t]*\{\{\s*" + key + r"\s*\}\}[ \t]*\n(?:[ \t]*\n)?", "", template, flags=re.M)
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------

_TAG_RE = re.compile(r"<(/?)(submission|feedback|example_answer)\s*>", re.I)
_INJECTION_PATTERNS = {
    "ignore-instructions": re.compile(
        r"\b(ignore|disregard|forget)\b[^.\n]{0,40}\b(previous|prior|above|earlier|all|the)\b[^.\n]{0,20}"
        r"\b(instructions?|prompts?|rules|directions)\b",
        re.I,
    ),
    "score-demand": re.compile(
        r"\b(give|award|assign|grade)\b[^.\n]{0,30}\b(full|maximum|max|perfect|100\s*%|1\.0)\b[^.\n]{0,15}"
        r"\b(score|points|marks?|grade|credit)\b",
        re.I,
    ),
    "role-override": re.compile(r"\b(you are now|act as|new instructions|system prompt)\b", re.I),
    "delimiter-tag": _TAG_RE,
}


def escape_delimiters(text: str) -> str:
    """Neutralise delimiter tags inside untrusted text."""
    return _TAG_RE.sub(lambda m: f"&lt;{m.group(1)}{m.group(2)}&gt;", text)


def injection_flags(text: str) -> list[str]:
    """Names of prompt-injection heuristics matched by a submission."""
    return [name for name, pattern in _INJECTION_PATTERNS.items() if pattern.search(text)]


def _cell(text: Optional[str]) -> str:
    return " ".join((text or "").split()).replace("|", "\\|")


def render_rubric(rubric: Rubric) -> str:
    lines = ["# Grading rubric"]
    if rubric.preamble:
        lines.append(rubric.preamble.strip())
    if rubric.expression is not None:
        lines.append(f"Final score = {format_expression(rubric.expression)}")
    else:
        lines.append("Final score = sum of the points of the satisfied criteria")
    lines.append("")
    lines.append("| Criterion | Description | Points | Explanation |")
    lines.append("|---|---|---|---|")
    for c in rubric.criteria:
        lines.append(f"| {c.label} | {_cell(c.description)} | {format_fraction(c.points)} | {_cell(c.explanation)} |")
    return "\n".join(lines)


def render_examples(examples: Sequence[GradedExample]) -> str:
    blocks = ["# Graded examples"]
    for i, ex in enumerate(examples, 1):
        satisfied = ", ".join(sorted(ex.satisfied)) or "none"
        blocks.append(
            f"## Example {i}\n"
            f"<example_answer>\n{escape_delimiters(ex.text)}\n</example_answer>\n"
            f"Satisfied criteria: {satisfied}\n"
            f"Score: {format_score(ex.score)}\n"
            f"Feedback: {escape_delimiters(ex.feedback)}"
        )
    return "\n\n".join(blocks)


def render(packet: ExercisePacket, variant: PromptVariant, templates: TemplateSet) -> PromptBundle:
    """Build the system/user prompt pair for one grading call."""
    variant = PromptVariant(variant)
    problems = check_templates(templates)
    if problems:
        raise TemplateError("; ".join(problems))
    if not packet.question.strip() or not packet.submission.strip():
        raise ValueError("question and submission must be non-empty")
    if variant.uses_examples and not packet.examples:
        raise ValueError(f"variant {variant.value!r} requires at least one graded example")
    if variant.uses_rubric:
        diags = validate(packet.rubric)
        if diags:
            raise ValueError(f"rubric {packet.rubric.exercise_id} does not validate: {'; '.join(diags)}")
    for ex in packet.examples:
        if ex.exercise_id and ex.exercise_id != packet.rubric.exercise_id:
            raise ValueError(f"example from exercise {ex.exercise_id} in packet for {packet.rubric.exercise_id}")
    values = {
        "question": packet.question.strip(),
        "reference_answer": packet.reference_answer.strip(),
        "rubric": render_rubric(packet.rubric) if variant.uses_rubric else "",
        "examples": render_examples(packet.examples) if variant.uses_examples else "",
        "submission": f"<submission>\n{escape_delimiters(packet.submission)}\n</submission>",
    }
    return PromptBundle(system=templates.system, user=_substitute(templates.user, values))


def render_tone_revision(ta_feedback: str, templates: TemplateSet) -> PromptBundle:
    """Prompt asking for a tone-only rewrite of TA feedback; the score is never sent."""
    if not ta_feedback or not ta_feedback.strip():
        raise ValueError("feedback to revise must be non-empty")
    problems = [d for d in check_templates(templates) if d.startswith("tone")]
    if problems:
        raise TemplateError("; ".join(problems))
    wrapped = f"<feedback>\n{escape_delimiters(ta_feedback)}\n</feedback>"
    return PromptBundle(system=templates.tone_system, user=_substitute(templates.tone_user, {"feedback": wrapped}))


# --------------------------------------------------------------------------
# Response parsing
# --------------------------------------------------------------------------

_LABEL_ENTRY_RE = re.compile(r"^(?:criteri(?:on|a)\s*)?[(\[]?([A-Za-z])[)\]]?[.:]?$", re.I)


def extract_json_object(raw: str) -> dict:
    """First JSON object embedded in ``raw`` (prose and code fences are skipped)."""
    decoder = json.JSONDecoder(parse_float=Decimal)
    start = raw.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        start = raw.find("{", start + 1)
    raise NoJsonFound("no JSON object found in grader response")


def _as_fraction(value) -> Fraction:
    if isinstance(value, bool):
        raise ScoreOutOfRange(f"score {value!r} is not a number")
    try:
        if isinstance(value, (int, Decimal)):
            dec = Decimal(value)
        elif isinstance(value, float):
            dec = Decimal(repr(value))
        elif isinstance(value, str):
            dec = Decimal(value.strip())
        else:
            raise ScoreOutOfRange(f"score {value!r} is not a number")
    except InvalidOperation:
        raise ScoreOutOfRange(f"score {value!r} is not a number") from None
    if not dec.is_finite():
        raise ScoreOutOfRange(f"score {value!r} is not finite")
    return Fraction(dec)


def normalize_labels(entries, rubric: Rubric) -> frozenset:
    if isinstance(entries, str):
        entries = [e for e in re.split(r"[,;\s]+", entries) if e]
    if not isinstance(entries, (list, tuple)):
        raise ResponseError("satisfied_criteria must be a list")
    labels = set()
    for entry in entries:
        m = _LABEL_ENTRY_RE.match(str(entry).strip())
        if m is None:
            raise UnknownCriterion(str(entry))
        label = m.group(1).upper()
        if label not in rubric.labels:
            raise UnknownCriterion(label)
        labels.add(label)
    return frozenset(labels)


def parse_response(raw: str, rubric: Rubric) -> GradeResponse:
    """Parse a grader completion into a :class:`GradeResponse`.

    The reported score may exceed 1 (a tally error) but not the rubric's raw
    maximum; :func:`crosscheck_tally` recomputes the authoritative score.
    """
    obj = extract_json_object(raw)
    for name in ("score", "feedback", "satisfied_criteria"):
        if name not in obj or obj[name] is None:
            raise MissingField(name)
    score = _as_fraction(obj["score"])
    ceiling = max(Fraction(1), raw_sum(rubric, rubric.labels))
    if score < 0 or score > ceiling:
        raise ScoreOutOfRange(f"score {format_fraction(score)} outside [0, {format_fraction(ceiling)}]")
    feedback = obj["feedback"]
    if not isinstance(feedback, str):
        feedback = json.dumps(feedback, default=str)
    satisfied = normalize_labels(obj["satisfied_criteria"], rubric)
    return GradeResponse(score=score, feedback=feedback, satisfied=satisfied)


def crosscheck_tally(response: GradeResponse, rubric: Rubric) -> ReconciledGrade:
    recomputed = evaluate(rubric, response.satisfied)
    mismatch = abs(response.score - recomputed) > TALLY_TOLERANCE
    return ReconciledGrade(
        response=response, recomputed_score=recomputed, tally_mismatch=mismatch, final_score=recomputed
    )

