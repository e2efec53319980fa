"""Grading rubrics: criteria with point allotments and a score-combining expression.

A rubric is a list of binary criteria labelled ``A``..``Z``.  Each criterion
carries a point allotment in [0, 1].  The final score of a submission is either
the plain sum of the points of the satisfied criteria, or the value of an
optional expression over criterion references, e.g. ``min(1, A + B + C)``.

Scores are exact :class:`fractions.Fraction` values internally and rendered
with four fractional digits externally.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Iterable, Optional, Union

MAX_ENUMERATED_CRITERIA = 16
LABEL_RE = re.compile(r"^[A-Z]$")


class RubricError(ValueError):
    """Raised for malformed rubric documents and expressions.

    ``line`` and ``column`` are 1-based positions in the source document (or in
    the expression string, for expression syntax errors) when known.
    """

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.message = message
        self.line = line
        self.column = column
        where = ""
        if line is not None and column is not None:
            where = f" (line {line}, column {column})"
        elif column is not None:
            where = f" (column {column})"
        super().__init__(message + where)


# --------------------------------------------------------------------------
# Expression AST
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: Fraction


@dataclass(frozen=True)
class Ref:
    label: str


@dataclass(frozen=True)
class Add:
    terms: tuple


@dataclass(frozen=True)
class Mul:
    factors: tuple


@dataclass(frozen=True)
class Min:
    args: tuple


@dataclass(frozen=True)
class Max:
    args: tuple


Expr = Union[Num, Ref, Add, Mul, Min, Max]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+(?:\.\d*)?|\.\d+)|(?P<func>min|max)\s*\(|(?P<label>[A-Z])(?![A-Za-z0-9_])"
    r"|(?P<op>[+*(),]))"
)


@dataclass
class _Token:
    kind: str
    text: str
    column: int


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            raise RubricError(f"unexpected character {source[pos]!r} in expression", column=pos + 1)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append(_Token(kind, m.group(kind), start + 1))
        pos = m.end()
    tokens.append(_Token("end", "", n + 1))
    return tokens


class _Parser:
    # expr := term ('+' term)* ; term := factor ('*' factor)*
    # factor := number | LABEL | min(expr (, expr)+) | max(...) | '(' expr ')'

    def __init__(self, source: str):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def _error(self, message: str) -> RubricError:
        return RubricError(message, column=self.tok.column)

    def _expect_op(self, op: str) -> None:
        if self.tok.kind != "op" or self.tok.text != op:
            found = self.tok.text or "end of expression"
            raise self._error(f"expected {op!r}, found {found!r}")
        self.i += 1

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            raise self._error(f"unexpected {self.tok.text!r} after expression")
        return node

    def expr(self) -> Expr:
        terms = [self.term()]
        while self.tok.kind == "op" and self.tok.text == "+":
            self.i += 1
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else Add(tuple(terms))

    def term(self) -> Expr:
        factors = [self.factor()]
        while self.tok.kind == "op" and self.tok.text == "*":
            self.i += 1
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else Mul(tuple(factors))

    def factor(self) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.i += 1
            return Num(Fraction(Decimal(tok.text)))
        if tok.kind == "label":
            self.i += 1
            return Ref(tok.text)
        if tok.kind == "func":
            self.i += 1
            args = [self.expr()]
            while self.tok.kind == "op" and self.tok.text == ",":
                self.i += 1
                args.append(self.expr())
            if len(args) < 2:
                raise self._error(f"{tok.text}() needs at least two arguments")
            self._expect_op(")")
            return (Min if tok.text == "min" else Max)(tuple(args))
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.expr()
            self._expect_op(")")
            return node
        found = tok.text or "end of expression"
        raise self._error(f"expected a number, criterion label, min/max or '(', found {found!r}")


def parse_expression(source: str) -> Expr:
    """Parse a score expression such as ``min(1, A + B + C)``."""
    return _Parser(source).parse()


def format_fraction(value: Fraction) -> str:
    """Shortest exact decimal for ``value`` (falls back to 17 significant digits)."""
    d = Decimal(value.numerator) / Decimal(value.denominator)
    if Fraction(d) != value:
        return repr(float(value))
    text = format(d.normalize(), "f")
    return text


def format_expression(node: Expr) -> str:
    if isinstance(node, Num):
        return format_fraction(node.value)
    if isinstance(node, Ref):
        return node.label
    if isinstance(node, Add):
        return " + ".join(format_expression(t) for t in node.terms)
    if isinstance(node, Mul):
        # a sum inside a product needs parentheses to survive the round trip
        parts = []
        for f in node.factors:
            text = format_expression(f)
            parts.append(f"({text})" if isinstance(f, Add) else text)
        return " * ".join(parts)
    name = "min" if isinstance(node, Min) else "max"
    return f"{name}(" + ", ".join(format_expression(a) for a in node.args) + ")"


def expression_labels(node: Expr) -> set[str]:
    if isinstance(node, Ref):
        return {node.label}
    if isinstance(node, Num):
        return set()
    children = getattr(node, "terms", None) or getattr(node, "factors", None) or node.args
    out: set[str] = set()
    for child in children:
        out |= expression_labels(child)
    return out


def eval_expression(node: Expr, bindings: dict[str, Fraction]) -> Fraction:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Ref):
        return bindings[node.label]
    if isinstance(node, Add):
        return sum((eval_expression(t, bindings) for t in node.terms), Fraction(0))
    if isinstance(node, Mul):
        out = Fraction(1)
        for f in node.factors:
            out *= eval_expression(f, bindings)
        return out
    values = [eval_expression(a, bindings) for a in node.args]
    return min(values) if isinstance(node, Min) else max(values)


# --------------------------------------------------------------------------
# Rubric
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Criterion:
    label: str
    description: str
    points: Fraction
    explanation: Optional[str] = None


@dataclass(frozen=True)
class Rubric:
    exercise_id: str
    criteria: tuple[Criterion, ...]
    expression: Optional[Expr] = None
    preamble: Optional[str] = None
    _points: dict = field(init=False, repr=False, compare=False, hash=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "criteria", tuple(self.criteria))
        object.__setattr__(self, "_points", {c.label: c.points for c in self.criteria})

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.criteria)

    def points(self, label: str) -> Fraction:
        return self._points[label]

    def criterion(self, label: str) -> Criterion:
        for c in self.criteria:
            if c.label == label:
                return c
        raise KeyError(label)


CriteriaSet = frozenset


def _check_labels(rubric: Rubric, satisfied: Iterable[str]) -> frozenset:
    satisfied = frozenset(satisfied)
    unknown = sorted(satisfied - set(rubric.labels))
    if unknown:
        raise RubricError(
            f"unknown criterion {', '.join(unknown)} for exercise {rubric.exercise_id}"
        )
    return satisfied


def _bindings(rubric: Rubric, satisfied: frozenset) -> dict[str, Fraction]:
    return {c.label: (c.points if c.label in satisfied else Fraction(0)) for c in rubric.criteria}


def raw_sum(rubric: Rubric, satisfied: Iterable[str]) -> Fraction:
    """Plain sum of satisfied points, ignoring any expression (diagnostic use)."""
    satisfied = _check_labels(rubric, satisfied)
    return sum((c.points for c in rubric.criteria if c.label in satisfied), Fraction(0))


def evaluate(rubric: Rubric, satisfied: Iterable[str]) -> Fraction:
    """Final score for the given set of satisfied criterion labels.

    Unsatisfied references are bound to 0.  No clamping is applied; a rubric
    that passes :func:`validate` always yields a value in [0, 1].
    """
    satisfied = _check_labels(rubric, satisfied)
    if rubric.expression is None:
        return sum((c.points for c in rubric.criteria if c.label in satisfied), Fraction(0))
    return eval_expression(rubric.expression, _bindings(rubric, satisfied))


def all_subsets(labels: Iterable[str]):
    labels = list(labels)
    for r in range(len(labels) + 1):
        for combo in itertools.combinations(labels, r):
            yield frozenset(combo)


def _structural_diagnostics(rubric: Rubric) -> list[str]:
    diags = []
    if not rubric.criteria:
        diags.append("rubric has no criteria")
    seen = set()
    for c in rubric.criteria:
        if not LABEL_RE.match(c.label or ""):
            diags.append(f"invalid criterion label {c.label!r}; expected a single letter A-Z")
        if c.label in seen:
            diags.append(f"duplicate criterion {c.label}")
        seen.add(c.label)
        if not (0 <= c.points <= 1):
            diags.append(f"criterion {c.label} points {format_fraction(c.points)} out of range [0, 1]")
        if not (c.description or "").strip():
            diags.append(f"criterion {c.label} has an empty description")
    if rubric.expression is not None:
        for label in sorted(expression_labels(rubric.expression) - seen):
            diags.append(f"undefined criterion {label}")
    return diags


def validate(rubric: Rubric) -> list[str]:
    """Return human-readable diagnostics; an empty list means the rubric is sound."""
    diags = _structural_diagnostics(rubric)
    if diags:
        return diags
    if len(rubric.criteria) > MAX_ENUMERATED_CRITERIA:
        return [f"too many criteria ({len(rubric.criteria)}) to check exhaustively"]
    if rubric.expression is None:
        total = sum((c.points for c in rubric.criteria), Fraction(0))
        if total > 1:
            diags.append(f"maximum raw sum {format_fraction(total)} exceeds 1; expression required")
        return diags
    lo = hi = None
    for subset in all_subsets(rubric.labels):
        value = eval_expression(rubric.expression, _bindings(rubric, subset))
        lo = value if lo is None else min(lo, value)
        hi = value if hi is None else max(hi, value)
    if hi > 1:
        diags.append(f"expression reaches {format_fraction(hi)}, exceeding 1")
    if lo < 0:
        diags.append(f"expression reaches {format_fraction(lo)}, below 0")
    return diags


# --------------------------------------------------------------------------
# Rubric documents (JSON)
# --------------------------------------------------------------------------


def _position(source: str, needle: str) -> tuple[Optional[int], Optional[int]]:
    idx = source.find(needle)
    if idx < 0:
        return None, None
    line = source.count("\n", 0, idx) + 1
    column = idx - (source.rfind("\n", 0, idx) + 1) + 1
    return line, column


def rubric_from_dict(doc: dict, source: str = "") -> Rubric:
    if not isinstance(doc, dict):
        raise RubricError("rubric document must be a JSON object", 1, 1)
    for key in ("exercise_id", "criteria"):
        if key not in doc:
            raise RubricError(f"missing field {key!r}", 1, 1)
    criteria = []
    for i, raw in enumerate(doc["criteria"]):
        if not isinstance(raw, dict) or "label" not in raw or "points" not in raw:
            raise RubricError(f"criterion #{i + 1} needs 'label' and 'points'")
        points = raw["points"]
        if isinstance(points, bool) or not isinstance(points, (int, float, Decimal)):
            raise RubricError(f"criterion {raw['label']} points must be a number")
        criteria.append(
            Criterion(
                label=str(raw["label"]),
                description=str(raw.get("description") or ""),
                points=Fraction(Decimal(str(points)) if isinstance(points, float) else points),
                explanation=raw.get("explanation"),
            )
        )
    expression = None
    text = doc.get("expression")
    if text is not None and str(text).strip():
        try:
            expression = parse_expression(str(text))
        except RubricError as exc:
            line, column = _position(source, str(text)) if source else (None, None)
            if line is not None:
                # the JSON string starts one character after the opening quote
                raise RubricError(exc.message, line, column + (exc.column or 1) - 1) from None
            raise
    rubric = Rubric(
        exercise_id=str(doc["exercise_id"]),
        criteria=tuple(criteria),
        expression=expression,
        preamble=doc.get("preamble"),
    )
    problems = _structural_diagnostics(rubric)
    if problems:
        first = problems[0]
        line = column = None
        m = re.search(r"criterion ([A-Z])\b", first)
        if source and m:
            line, column = _position(source, f'"label": "{m.group(1)}"')
        raise RubricError(first, line, column)
    return rubric


def parse_rubric(source: str) -> Rubric:
    """Parse a rubric JSON document.

    Raises :class:`RubricError` for syntax errors (with line/column), duplicate
    labels, out-of-range points and expressions naming undefined criteria.
    Rubrics that merely overflow 1 still parse; :func:`validate` reports them.
    """
    try:
        doc = json.loads(source, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise RubricError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    return rubric_from_dict(doc, source)


def rubric_to_dict(rubric: Rubric) -> dict:
    return {
        "exercise_id": rubric.exercise_id,
        "preamble": rubric.preamble,
        "expression": format_expression(rubric.expression) if rubric.expression is not None else None,
        "criteria": [
            {
                "label": c.label,
                "description": c.description,
                "explanation": c.explanation,
                "points": float(c.points),
            }
            for c in rubric.criteria
        ],
    }


def serialize_rubric(rubric: Rubric) -> str:
    return json.dumps(rubric_to_dict(rubric), indent=2, ensure_ascii=False) + "\n"


def load_rubric(path) -> Rubric:
    with open(path, encoding="utf-8") as fh:
        return parse_rubric(fh.read())


def format_score(value: Fraction) -> str:
    """Render a score with four fractional digits, e.g. ``0.7500``."""
    return f"{Decimal(value.numerator) / Decimal(value.denominator):.4f}"
