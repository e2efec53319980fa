import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import leniency_fixture, make_course
from gradekit.data import DIFFICULTIES
from gradekit.evaluation import (
    ALL,
    EvaluationError,
    ablation_report,
    bootstrap_ci,
    classification_accuracy,
    criterion_outcomes,
    feedback_length_stats,
    gold_correctness,
    grading_difference,
    grouped_reports,
    read_feedback_lengths_csv,
    read_report_csv,
    report_markdown,
    write_feedback_lengths_csv,
    write_report_csv,
)
from oracles import naive_metrics, random_eval_fixture


def outcomes_for(course, gold, predicted, answer_exercise):
    return criterion_outcomes(gold, predicted, answer_exercise, course).outcomes


def test_ca_worked_example():
    # four (answer, criterion) pairs with gold/predicted (1,1), (0,1), (1,1), (0,0)
    course = make_course({"e1": 2, "e2": 2})
    gold = {"x": frozenset({"A"}), "y": frozenset({"A"})}
    predicted = {"x": frozenset({"A", "B"}), "y": frozenset({"A"})}
    outcomes = outcomes_for(course, gold, predicted, {"x": "e1", "y": "e2"})
    assert len(outcomes) == 4
    assert classification_accuracy(outcomes) == 0.75


def test_single_lenient_answer():
    course = make_course({"e": 2})
    outcomes = outcomes_for(course, {"x": frozenset("A")}, {"x": frozenset("AB")}, {"x": "e"})
    assert grading_difference(outcomes) == (0.5, 0.0)
    assert grading_difference(outcomes, raw=True) == (1.0, 0.0)


def test_leniency_fixture_hand_computed():
    course, gold, predicted, answer_exercise = leniency_fixture(criteria=2)
    outcomes = outcomes_for(course, gold, predicted, answer_exercise)
    # (45 * 1 - 5 * 1) / 100 criteria-count difference, halved per criterion
    mean_raw, _ = grading_difference(outcomes, raw=True)
    mean, std = grading_difference(outcomes)
    assert mean_raw == pytest.approx(0.40, abs=1e-15)
    assert mean == pytest.approx(0.20, abs=1e-15)
    # second moment (45 + 5) * 0.25 / 100 = 0.125
    assert std == pytest.approx(math.sqrt(0.125 - 0.2**2), abs=1e-15)
    assert classification_accuracy(outcomes) == 0.75


def test_random_fixtures_match_naive_loops():
    gen = random.Random(2024)
    for _ in range(50):
        labels_of_ex, gold, predicted, labels_of, answer_exercise = random_eval_fixture(gen)
        course = make_course({e: len(labs) for e, labs in labels_of_ex.items()})
        outcomes = outcomes_for(course, gold, predicted, answer_exercise)
        ca, mean, var = naive_metrics(gold, predicted, labels_of)
        got_mean, got_std = grading_difference(outcomes)
        assert classification_accuracy(outcomes) == float(ca)
        assert got_mean == float(mean)
        assert got_std == math.sqrt(var)


def test_missing_sides_reported():
    course = make_course({"e": 1})
    result = criterion_outcomes({"a": frozenset(), "b": frozenset()}, {"b": frozenset(), "c": frozenset()}, {"a": "e", "b": "e", "c": "e"}, course)
    assert result.missing_predicted == ["a"] and result.missing_gold == ["c"]
    assert not result.complete and len(result.outcomes) == 1


def test_empty_inputs_raise():
    with pytest.raises(EvaluationError):
        classification_accuracy([])
    with pytest.raises(EvaluationError):
        grading_difference([])
    with pytest.raises(EvaluationError):
        bootstrap_ci("mean", [])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=30))
def test_metric_ranges(pairs):
    course = make_course({"e": 1})
    gold = {f"a{i}": frozenset("A" if g else "") for i, (g, _) in enumerate(pairs)}
    predicted = {f"a{i}": frozenset("A" if p else "") for i, (_, p) in enumerate(pairs)}
    outcomes = outcomes_for(course, gold, predicted, {a: "e" for a in gold})
    ca = classification_accuracy(outcomes)
    mean, std = grading_difference(outcomes)
    assert 0 <= ca <= 1 and -1 <= mean <= 1 and std >= 0
    if gold == predicted:
        assert ca == 1 and mean == 0 and std == 0


# ---------------------------------------------------------------- bootstrap


def test_constant_data_zero_width():
    for stat in ("mean", "std"):
        lo, hi = bootstrap_ci(stat, np.full(50, 0.7), seed=1)
        assert lo == hi


def test_bernoulli_width_matches_normal_approximation():
    gen = np.random.default_rng(5)
    data = (gen.random(500) < 0.9).astype(float)
    lo, hi = bootstrap_ci("mean", data, resamples=2000, seed=3)
    expected = 2 * 1.96 * math.sqrt(0.9 * 0.1 / 500)
    assert abs((hi - lo) - expected) <= 0.2 * expected
    assert lo <= data.mean() <= hi


def test_bootstrap_seed_determinism_and_callable():
    data = np.arange(30, dtype=float)
    assert bootstrap_ci("mean", data, seed=4) == bootstrap_ci("mean", data, seed=4)
    assert bootstrap_ci("mean", data, seed=4) != bootstrap_ci("mean", data, seed=5)
    # a callable statistic consumes the same resample indices
    assert bootstrap_ci(np.mean, data, seed=4) == pytest.approx(bootstrap_ci("mean", data, seed=4), abs=1e-12)
    assert bootstrap_ci(np.std, data, seed=4) == pytest.approx(bootstrap_ci("std", data, seed=4), abs=1e-12)


def test_bootstrap_rejects_small_resamples():
    with pytest.raises(ValueError):
        bootstrap_ci("mean", [1.0, 2.0], resamples=100)


# ---------------------------------------------------------------- reports


def _graded_course():
    difficulty = {"e1": "easy", "e2": "medium", "e3": "hard"}
    return make_course({"e1": 1, "e2": 3, "e3": 2}, difficulty)


def _runs(course, seed):
    gen = random.Random(seed)
    answer_exercise = {f"{e}-s{i}": e for e in course for i in range(12)}
    gold = {a: frozenset(l for l in course[e].rubric.labels if gen.random() < 0.6) for a, e in answer_exercise.items()}
    strict = {a: frozenset(list(s)[:-1]) if s else s for a, s in gold.items()}
    lenient = {a: frozenset(course[e].rubric.labels) for a, e in answer_exercise.items()}
    return gold, answer_exercise, {"strict": strict, "lenient": lenient, "exact": dict(gold)}


def test_ablation_signs_and_grid_shape():
    course = _graded_course()
    gold, answer_exercise, runs = _runs(course, 1)
    reports = ablation_report(runs, gold, answer_exercise, course, grader="g", resamples=1000)
    assert len(reports) == 3 * len(DIFFICULTIES)
    by_key = {(r.variant, r.difficulty): r for r in reports}
    for d in ("easy", "medium", "hard"):
        assert by_key[("strict", d)].mean_diff <= 0
        assert by_key[("lenient", d)].mean_diff >= 0
        assert by_key[("exact", d)].ca == 1 and by_key[("exact", d)].mean_diff == 0
    assert by_key[("exact", "trivial")].n_answers == 0 and by_key[("exact", "trivial")].ca is None
    assert any(by_key[("strict", d)].mean_diff < 0 for d in ("easy", "medium", "hard"))


def test_ablation_requires_same_answers():
    course = _graded_course()
    gold, answer_exercise, runs = _runs(course, 2)
    runs["strict"] = {a: s for a, s in list(runs["strict"].items())[1:]}
    with pytest.raises(EvaluationError):
        ablation_report(runs, gold, answer_exercise, course)


def test_grouped_reports_overall_matches_direct():
    course = _graded_course()
    gold, answer_exercise, runs = _runs(course, 3)
    reports = grouped_reports({("g", "v"): runs["lenient"]}, gold, answer_exercise, course, resamples=1000, seed=7)
    overall = [r for r in reports if r.difficulty == ALL][0]
    outcomes = outcomes_for(course, gold, runs["lenient"], answer_exercise)
    assert overall.ca == classification_accuracy(outcomes)
    assert overall.n_answers == len(gold)
    assert overall.ca_low <= overall.ca <= overall.ca_high
    again = grouped_reports({("g", "v"): runs["lenient"]}, gold, answer_exercise, course, resamples=1000, seed=7)
    assert again == reports


def test_report_csv_round_trip_and_markdown(tmp_path):
    course = _graded_course()
    gold, answer_exercise, runs = _runs(course, 4)
    reports = grouped_reports({("g", v): p for v, p in runs.items()}, gold, answer_exercise, course, resamples=1000)
    path = tmp_path / "report.csv"
    write_report_csv(reports, path, {"config_hash": "h", "seeds_text": "bootstrap=1"})
    back = read_report_csv(path)
    assert [r.key for r in back] == [r.key for r in reports]
    for a, b in zip(back, reports):
        assert a.ca == (None if b.ca is None else pytest.approx(b.ca, abs=1e-6))
    text = report_markdown(reports, provenance={"config_hash": "h", "seeds_text": "bootstrap=1"})
    assert "Classification accuracy" in text and "Mean grading difference" in text and "`h`" in text


def test_feedback_length_cells(tmp_path):
    course = make_course({"e": 1})
    gold = {"a": frozenset("A"), "b": frozenset(), "c": frozenset("A")}
    correctness = gold_correctness(gold, {a: "e" for a in gold}, course)
    assert correctness == {"a": False, "b": False, "c": False}  # 0.1 points is not a full score
    correctness = {"a": True, "b": False, "c": True}
    rows = feedback_length_stats([("a", "g", "ok"), ("c", "g", "ok"), ("b", "g", "three short words"), ("z", "g", "skip")], correctness)
    by = {(r.grader, r.correct): r for r in rows}
    assert by[("g", True)].mean_chars == 2 and by[("g", True)].n == 2
    assert by[("g", False)].mean_words == 3
    write_feedback_lengths_csv(rows, tmp_path / "f.csv")
    assert read_feedback_lengths_csv(tmp_path / "f.csv") == rows


def test_gold_correctness_full_score():
    from conftest import make_rubric
    from gradekit.data import Exercise

    course = {"e": Exercise("e", "Q", "R", "easy", make_rubric({"A": 0.5, "B": 0.5}, exercise_id="e"))}
    assert gold_correctness({"x": frozenset("AB"), "y": frozenset("A")}, {"x": "e", "y": "e"}, course) == {"x": True, "y": False}
