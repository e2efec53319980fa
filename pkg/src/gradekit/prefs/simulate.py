"""Forward simulation of satisfaction ratings from known model parameters."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model import Rating


def simulate_ratings(
    n_ratings: int,
    grader_effects: dict[str, float],
    n_students: int = 20,
    n_exercises: int = 5,
    cutpoints: Sequence[float] = (-1.5, -0.5, 0.5, 1.5),
    score_slope: float = 0.8,
    total_slope: float = 0.4,
    exercise_sd: float = 0.4,
    student_sd: float = 0.5,
    seed: int = 0,
    correct_rate: float = 0.78,
    grader_weights: Optional[Sequence[float]] = None,
) -> list[Rating]:
    """Draw ratings from the ordered-probit model with planted grader effects.

    Exercise scores are 1 for correct answers and uniform on [0, 0.9] otherwise;
    assignment totals are per-student means of a noisy ability.
    """
    gen = np.random.default_rng(seed)
    graders = list(grader_effects)
    if len(cutpoints) < 1:
        raise ValueError("need at least one cutpoint")
    exercise_effect = gen.normal(0.0, exercise_sd, n_exercises)
    student_effect = gen.normal(0.0, student_sd, n_students)
    ability = np.clip(gen.normal(0.8, 0.1, n_students), 0.0, 1.0)
    probs = None if grader_weights is None else np.asarray(grader_weights, float) / np.sum(grader_weights)
    cut = np.asarray(cutpoints, dtype=float)
    out = []
    for i in range(n_ratings):
        g = int(gen.choice(len(graders), p=probs))
        e = int(gen.integers(n_exercises))
        s = int(gen.integers(n_students))
        correct = bool(gen.random() < correct_rate)
        score = 1.0 if correct else round(float(gen.uniform(0.0, 0.9)), 4)
        total = round(float(np.clip(ability[s] + gen.normal(0, 0.05), 0.0, 1.0)), 4)
        latent = grader_effects[graders[g]] + exercise_effect[e] + student_effect[s] + score_slope * score + total_slope * total
        latent = latent + gen.standard_normal()
        y = int(np.searchsorted(cut, latent)) + 1
        out.append(Rating(f"a{i:05d}", f"s{s:03d}", f"e{e:02d}", graders[g], y, score, total, correct))
    return out
