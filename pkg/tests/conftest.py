import json
import os
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

from gradekit.rubric import rubric_from_dict  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_rubric(points: dict, expression=None, exercise_id: str = "ex"):
    return rubric_from_dict(
        {
            "exercise_id": exercise_id,
            "expression": expression,
            "criteria": [
                {"label": lab, "description": f"criterion {lab}", "points": float(p)} for lab, p in points.items()
            ],
        }
    )


@pytest.fixture
def fig2_rubric():
    return make_rubric({"A": 0.5, "B": 0.5, "C": 0.25}, "min(1, A + B + C)", "ex2")


@pytest.fixture(scope="session")
def demo_study(tmp_path_factory):
    """Synthetic study with recorded fixtures, built once per session."""
    from gradekit.synthetic import build_demo_study

    return build_demo_study(tmp_path_factory.mktemp("demo"))


def copy_config(study, tmp_path: Path, **changes) -> Path:
    """Config pointing at the shared demo inputs but writing into ``tmp_path``."""
    doc = json.loads(study.config.read_text())
    for key in ("course", "submissions", "examples", "graders", "gold", "human_grades", "ratings", "fixtures"):
        if doc.get(key):
            doc[key] = str(study.root / doc[key])
    doc["output_dir"] = str(tmp_path / "out")
    doc.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def make_course(criteria_counts: dict, difficulty="easy") -> dict:
    """Exercises with ``n`` equally weighted criteria each (difficulty may be a dict)."""
    from gradekit.data import Exercise

    course = {}
    for ex_id, n in criteria_counts.items():
        labels = [chr(65 + i) for i in range(n)]
        level = difficulty[ex_id] if isinstance(difficulty, dict) else difficulty
        rubric = make_rubric({lab: 0.1 for lab in labels}, exercise_id=ex_id)
        course[ex_id] = Exercise(ex_id, f"Question {ex_id}?", "Reference.", level, rubric)
    return course


def leniency_fixture(criteria: int = 2):
    """100 answers: 45 over-graded by one criterion, 5 under-graded by one, 50 exact."""
    course = make_course({"ex": criteria})
    labels = course["ex"].rubric.labels
    gold, predicted, answer_exercise = {}, {}, {}
    for i in range(100):
        aid = f"a{i:03d}"
        answer_exercise[aid] = "ex"
        if i < 45:
            gold[aid], predicted[aid] = frozenset(), frozenset(labels[:1])
        elif i < 50:
            gold[aid], predicted[aid] = frozenset(labels[:1]), frozenset()
        else:
            gold[aid] = predicted[aid] = frozenset(labels[:1])
    return course, gold, predicted, answer_exercise


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with acceptance(3, "tally cross-check", budget=5.0) as check: ...``;
    the line is printed live and again in the terminal summary.
    """
    import contextlib
    import time

    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextlib.contextmanager
    def run(number: int, title: str, budget: float = None):
        notes = []
        start = time.perf_counter()
        ok = False
        try:
            yield notes
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed >= budget:
                ok = False
                notes.append(f"runtime {elapsed:.1f}s exceeds {budget:g}s")
            detail = f" ({'; '.join(notes)})" if notes else ""
            line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} [{elapsed:.2f}s]{detail}"
            lines.append(line)
            print(line)
        if not ok:
            pytest.fail(line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
