"""A small, fully synthetic study used by the demo command and the end-to-end tests.

The builder writes a course of three exercises with twenty answers each, TA
examples, gold labels, TA grades, satisfaction ratings and a run config.  LLM
responses come from :class:`ScriptedGrader`, a deterministic stand-in for a
chat model with per-model leniency; its answers are recorded once through the
gateway so every later run replays them offline.
"""

from __future__ import annotations

import json
import random
import re
import shutil
import tempfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .config import load_config
from .data import write_jsonl
from .gateway import BackendConfig, Completion, Gateway
from .prefs.model import Rating, write_ratings
from .prompts import PromptBundle, escape_delimiters
from .rubric import Rubric, evaluate, format_score, raw_sum, rubric_from_dict, serialize_rubric
from .seeding import derive_seed, rng
from .study import GraderSpec, assign

ENDPOINT = "http://localhost:8000/v1"

EXERCISES = [
    {
        "id": "ex1",
        "difficulty": "easy",
        "question": "What does a cryptographic hash function map its input to?",
        "reference_answer": "A fixed-length digest that is infeasible to invert.",
        "criteria": [("A", "States that the output has a fixed length", "1", "the hash has a fixed-size output")],
        "expression": None,
    },
    {
        "id": "ex2",
        "difficulty": "medium",
        "question": "Why is salting used when storing password hashes?",
        "reference_answer": "Salts make identical passwords hash differently, defeat precomputed tables, "
        "and force per-user cracking effort.",
        "criteria": [
            ("A", "Identical passwords get different hashes", "0.5", "salt is unique per user"),
            ("B", "Precomputed (rainbow) tables become useless", "0.5", "attackers cannot reuse tables"),
            ("C", "Attackers must crack each account separately", "0.25", "cost scales with users"),
        ],
        "expression": "min(1, A + B + C)",
    },
    {
        "id": "ex3",
        "difficulty": "hard",
        "question": "Explain why a timing side channel can leak a secret during string comparison.",
        "reference_answer": "Early-exit comparison returns sooner on the first mismatch, so response time "
        "reveals how many leading bytes are correct; constant-time comparison prevents this.",
        "criteria": [
            ("A", "Early exit makes running time depend on the matching prefix", "0.5", "timing reveals the prefix"),
            ("B", "Names constant-time comparison as the fix", "0.5", "compare all bytes regardless"),
        ],
        "expression": None,
    },
]

# phrases a student writes when an answer covers a criterion
FRAGMENTS = {
    ("ex1", "A"): ["the digest always has the same fixed length", "output size is constant no matter the input"],
    ("ex2", "A"): ["two users with the same password end up with different hashes", "identical passwords no longer collide"],
    ("ex2", "B"): ["rainbow tables stop working", "precomputed tables cannot be reused"],
    ("ex2", "C"): ["each account has to be attacked on its own", "cracking effort multiplies per user"],
    ("ex3", "A"): ["the loop stops at the first wrong byte so timing shows the correct prefix",
                   "an early return leaks how many characters matched"],
    ("ex3", "B"): ["a constant-time comparison fixes it", "comparing every byte regardless of mismatches prevents it"],
}
FILLER = [
    "I think this is the main idea.",
    "This is covered in the lecture notes.",
    "Hashing is a one-way process.",
    "Security depends on the details.",
    "Attackers look for shortcuts.",
]

GRADERS = [
    {"grader_id": "gpt-4o", "kind": "llm", "weight": "0.25", "model": "gpt-4o"},
    {"grader_id": "llama-70b", "kind": "llm", "weight": "0.25", "model": "llama-3.1-70b-instruct"},
    {"grader_id": "llama-8b", "kind": "llm", "weight": "0.25", "model": "llama-3.1-8b-instruct"},
    {"grader_id": "grader-ta", "kind": "human", "weight": "0.125", "model": None},
    {"grader_id": "grader-ta-revised", "kind": "human-llm-revised", "weight": "0.125", "model": "gpt-4o-mini"},
]

# P(add an unsatisfied criterion), P(drop a satisfied one), P(wrong tally), P(unparseable)
PROFILES = {
    "gpt-4o": (0.05, 0.04, 0.0, 0.0),
    "llama-3.1-70b-instruct": (0.10, 0.06, 0.02, 0.0),
    "llama-3.1-8b-instruct": (0.30, 0.10, 0.05, 0.03),
}
VARIANT_SHIFT = {"rubric": (0.0, 0.06), "examples": (0.12, 0.0), "both": (0.0, 0.0)}
# planted satisfaction effect of each grader on the latent rating scale
RATING_EFFECTS = {"gpt-4o": 0.4, "llama-70b": 0.2, "llama-8b": -0.3, "grader-ta": 0.0, "grader-ta-revised": 0.3}

SEEDS = {"assignment": 11, "sampling": 12, "bootstrap": 13, "mcmc": 14}


def _rubric(entry: dict) -> Rubric:
    return rubric_from_dict(
        {
            "exercise_id": entry["id"],
            "expression": entry["expression"],
            "criteria": [
                {"label": lab, "description": desc, "points": float(pts), "explanation": expl}
                for lab, desc, pts, expl in entry["criteria"]
            ],
        }
    )


def _answer_text(ex_id: str, satisfied: frozenset, gen: random.Random) -> str:
    parts = [gen.choice(FRAGMENTS[(ex_id, lab)]) for lab in sorted(satisfied)]
    parts.append(gen.choice(FILLER))
    gen.shuffle(parts)
    return " ".join(p[0].upper() + p[1:] + ("" if p.endswith(".") else ".") for p in parts)


def _truth(rubric: Rubric, gen: random.Random) -> frozenset:
    # most answers are fully correct, the rest miss criteria at random
    if gen.random() < 0.55:
        return frozenset(rubric.labels)
    return frozenset(lab for lab in rubric.labels if gen.random() < 0.45)


def _ta_feedback(rubric: Rubric, satisfied: frozenset, gen: random.Random) -> str:
    missing = [c for c in rubric.criteria if c.label not in satisfied]
    if not missing:
        return gen.choice(["Correct.", "Good.", "Right, well done."])
    return "Missing: " + "; ".join(c.description.lower() for c in missing) + "."


class ScriptedGrader:
    """Chat-model stand-in: grades known answers with model-specific noise.

    Called like a gateway backend.  The decision for a prompt depends only on
    the model, the prompt variant and the answer, so recordings are stable.
    """

    _SUBMISSION = re.compile(r"<submission>\n(.*)\n</submission>", re.S)
    _FEEDBACK = re.compile(r"<feedback>\n?(.*?)\n?</feedback>", re.S)

    def __init__(self, truth: dict, course: dict, seed: int = 0, profiles: Optional[dict] = None):
        self.truth = {escape_delimiters(text): value for text, value in truth.items()}
        self.course = course
        self.seed = seed
        self.profiles = profiles or PROFILES
        self.calls = 0

    def __call__(self, bundle: PromptBundle, config: BackendConfig, key: str) -> Completion:
        self.calls += 1
        match = self._SUBMISSION.search(bundle.user)
        if match is None:
            feedback = self._FEEDBACK.search(bundle.user)
            text = feedback.group(1).strip() if feedback else bundle.user.strip()
            return Completion(f"Thanks for your answer! {text} Keep up the good work.")
        ex_id, satisfied = self.truth[match.group(1)]
        rubric = self.course[ex_id]
        variant = "both" if "# Grading rubric" in bundle.user and "# Graded examples" in bundle.user else (
            "rubric" if "# Grading rubric" in bundle.user else "examples"
        )
        p_add, p_drop, p_tally, p_garbage = self.profiles[config.model_name]
        add_shift, drop_shift = VARIANT_SHIFT[variant]
        gen = random.Random(derive_seed(self.seed, config.model_name, variant, match.group(1)))
        if gen.random() < p_garbage:
            return Completion("I am unable to grade this submission right now.")
        predicted = set()
        for lab in rubric.labels:
            if lab in satisfied:
                if gen.random() >= p_drop + drop_shift:
                    predicted.add(lab)
            elif gen.random() < p_add + add_shift:
                predicted.add(lab)
        score = evaluate(rubric, predicted)
        if gen.random() < p_tally:
            # a tallying slip: the plain sum where a clamp applies, else a quarter point off
            slip = raw_sum(rubric, predicted)
            if slip == score:
                slip = score - Fraction(1, 4) if score >= Fraction(1, 4) else score + Fraction(1, 4)
            score = slip
        missing = [c.description.lower() for c in rubric.criteria if c.label not in predicted]
        if missing:
            feedback = ("Your answer is partially correct. It does not yet address the following points: "
                        + "; ".join(missing) + ". Review the material and try to explain these aspects.")
        else:
            feedback = ("Your answer is correct and addresses every required point clearly. "
                        "Well done, the explanation is complete and precise.")
        body = json.dumps({"score": float(score), "feedback": feedback, "satisfied_criteria": sorted(predicted)})
        if config.model_name.endswith("8b-instruct"):
            body = f"Here is the grade:\n```json\n{body}\n```"
        return Completion(body, prompt_tokens=len(bundle.user) // 4, completion_tokens=len(body) // 4)


@dataclass
class DemoStudy:
    root: Path
    config: Path
    answers: int
    fixtures: int


def build_demo_study(directory, seed: int = 0, students: int = 20, record: bool = True) -> DemoStudy:
    """Write the synthetic study under ``directory`` and record replay fixtures."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    gen = random.Random(derive_seed(seed, "demo"))
    rubrics = {entry["id"]: _rubric(entry) for entry in EXERCISES}
    (root / "rubrics").mkdir(exist_ok=True)
    exercises = []
    for entry in EXERCISES:
        (root / "rubrics" / f"{entry['id']}.json").write_text(serialize_rubric(rubrics[entry["id"]]), encoding="utf-8")
        exercises.append({k: entry[k] for k in ("id", "question", "reference_answer", "difficulty")}
                         | {"rubric": f"rubrics/{entry['id']}.json"})
    (root / "course.json").write_text(json.dumps({"exercises": exercises}, indent=2) + "\n", encoding="utf-8")

    subs, gold, human, truth = [], [], [], {}
    student_ids = [f"s{i:02d}" for i in range(1, students + 1)]
    opted_out = {student_ids[6]} if students > 6 else set()
    for student in student_ids:
        for entry in EXERCISES:
            rubric = rubrics[entry["id"]]
            satisfied = _truth(rubric, gen)
            text = _answer_text(entry["id"], satisfied, gen)
            while text in truth:
                text += " " + gen.choice(FILLER)
            answer_id = f"{entry['id']}-{student}"
            truth[text] = (entry["id"], satisfied)
            subs.append({"answer_id": answer_id, "student_id": student, "exercise_id": entry["id"],
                         "text": text, "consent": student not in opted_out})
            gold.append({"answer_id": answer_id, "satisfied": sorted(satisfied)})
            human.append({"answer_id": answer_id, "satisfied": sorted(satisfied),
                          "feedback": _ta_feedback(rubric, satisfied, gen)})
    write_jsonl(root / "submissions.jsonl", subs)
    write_jsonl(root / "gold.jsonl", gold)
    write_jsonl(root / "human_grades.jsonl", human)

    examples = []
    for entry in EXERCISES:
        rubric = rubrics[entry["id"]]
        for _ in range(6):
            satisfied = _truth(rubric, gen)
            examples.append({
                "exercise_id": entry["id"],
                "text": _answer_text(entry["id"], satisfied, gen),
                "satisfied": sorted(satisfied),
                "score": format_score(evaluate(rubric, satisfied)),
                "feedback": _ta_feedback(rubric, satisfied, gen),
            })
    write_jsonl(root / "examples.jsonl", examples)

    grader_docs = []
    for g in GRADERS:
        doc = {"grader_id": g["grader_id"], "kind": g["kind"], "weight": g["weight"]}
        if g["model"]:
            doc["backend"] = {"endpoint_url": ENDPOINT, "model_name": g["model"], "credential_source": "GRADEKIT_API_KEY"}
        grader_docs.append(doc)
    (root / "graders.json").write_text(json.dumps({"graders": grader_docs}, indent=2) + "\n", encoding="utf-8")

    graders = [GraderSpec.from_dict(d) for d in grader_docs]
    plan = assign(sorted(s["answer_id"] for s in subs), graders, SEEDS["assignment"],
                  {s["answer_id"]: s["consent"] for s in subs})
    write_ratings(root / "ratings.csv", _ratings(subs, gold, rubrics, plan.mapping, seed))

    (root / "fixtures").mkdir(exist_ok=True)
    config = {
        "course": "course.json",
        "submissions": "submissions.jsonl",
        "examples": "examples.jsonl",
        "graders": "graders.json",
        "gold": "gold.jsonl",
        "human_grades": "human_grades.jsonl",
        "ratings": "ratings.csv",
        "fixtures": "fixtures",
        "output_dir": "out",
        "variant": "both",
        "eval_variants": ["rubric", "examples", "both"],
        "seeds": dict(SEEDS),
        "example_count": 4,
        "bootstrap_resamples": 1000,
        "mcmc": {"iterations": 1000, "warmup": 500, "chains": 4, "leapfrog_steps": 16, "reference": "grader-ta"},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    n_fixtures = record_fixtures(config_path, truth, rubrics, seed) if record else 0
    return DemoStudy(root, config_path, len(subs), n_fixtures)


def _ratings(subs: list, gold: list, rubrics: dict, mapping: dict, seed: int) -> list[Rating]:
    gen = rng(derive_seed(seed, "ratings"))
    scores = {}
    for s, g in zip(subs, gold):
        scores[s["answer_id"]] = evaluate(rubrics[s["exercise_id"]], frozenset(g["satisfied"]))
    totals = {}
    for s in subs:
        totals.setdefault(s["student_id"], []).append(float(scores[s["answer_id"]]))
    cut = np.array([-1.5, -0.5, 0.5, 1.5])
    out = []
    for s in subs:
        score = float(scores[s["answer_id"]])
        total = round(float(np.mean(totals[s["student_id"]])), 4)
        grader = mapping[s["answer_id"]]
        latent = RATING_EFFECTS[grader] + 0.8 * score + 0.4 * total - 0.6 + gen.standard_normal()
        y = int(np.searchsorted(cut, latent)) + 1
        out.append(Rating(s["answer_id"], s["student_id"], s["exercise_id"], grader, y, round(score, 4), total, score == 1.0))
    return out


def record_fixtures(config_path, truth: dict, rubrics: dict, seed: int = 0) -> int:
    """Run grade, dry-run and eval once against the scripted grader, recording every response."""
    from .pipeline import run_dry_run, run_eval, run_grade

    config_path = Path(config_path)
    fixtures = config_path.parent / "fixtures"
    scratch = Path(tempfile.mkdtemp(prefix="gradekit-record-"))
    try:
        cfg = load_config(config_path, {"output_dir": str(scratch)})
        gateway = Gateway(ScriptedGrader(truth, rubrics, seed), cache_dir=fixtures, max_in_flight=1)
        run_grade(cfg, gateway)
        run_dry_run(cfg, gateway=gateway)
        run_eval(cfg, gateway)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    return sum(1 for _ in fixtures.glob("*.json"))


__all__ = ["DemoStudy", "ScriptedGrader", "build_demo_study", "record_fixtures"]
