"""Mixed-effects ordered-probit model of student satisfaction ratings.

Latent mean per rating::

    latent_i = grader[g_i] + exercise[e_i] + student[s_i] + score_slope * score_i + total_slope * total_i
    P(y_i = k) = Phi(c_k - latent_i) - Phi(c_{k-1} - latent_i),   c_0 = -inf, c_K = +inf

All parameters live in one unconstrained vector ``theta``.  Cutpoints are
stored as the first cutpoint followed by log-increments, so any ``theta`` maps
to a strictly increasing cutpoint vector.  In the split model each grader has
a (incorrect, correct) factor pair tied to a per-grader mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import _kernels

DEFAULT_LEVELS = 5
PRIOR_SD = 2.0
HYPER_SD = 1.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
CSV_HEADER = ("answer_id", "student_id", "exercise_id", "grader_id", "y", "score", "total", "correct")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Rating:
    answer_id: str
    student_id: str
    exercise_id: str
    grader_id: str
    y: int
    score: float
    total: float
    correct: bool


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "t", "y"):
        return True
    if value in ("0", "false", "no", "f", "n"):
        return False
    raise ModelError(f"cannot read {text!r} as a boolean")


def load_ratings(path, n_levels: int = DEFAULT_LEVELS) -> list[Rating]:
    ratings = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise ModelError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, 2):
            try:
                rating = Rating(
                    answer_id=row["answer_id"],
                    student_id=row["student_id"],
                    exercise_id=row["exercise_id"],
                    grader_id=row["grader_id"],
                    y=int(row["y"]),
                    score=float(row["score"]),
                    total=float(row["total"]),
                    correct=_parse_bool(row["correct"]),
                )
            except (ValueError, ModelError) as exc:
                raise ModelError(f"{path}:{lineno}: {exc}") from None
            check_rating(rating, n_levels, f"{path}:{lineno}")
            ratings.append(rating)
    return ratings


def check_rating(r: Rating, n_levels: int, where: str = "") -> None:
    prefix = f"{where}: " if where else ""
    if not 1 <= r.y <= n_levels:
        raise ModelError(f"{prefix}rating {r.y} outside 1..{n_levels}")
    for name in ("score", "total"):
        value = getattr(r, name)
        if not (0.0 <= value <= 1.0):
            raise ModelError(f"{prefix}{name} {value} outside [0, 1]")


def write_ratings(path, ratings: Sequence[Rating]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in ratings:
            writer.writerow([r.answer_id, r.student_id, r.exercise_id, r.grader_id, r.y, r.score, r.total, int(r.correct)])


class RatingData:
    """Integer-coded rating arrays; level indices ``y`` are 0-based."""

    def __init__(
        self,
        ratings: Sequence[Rating],
        n_levels: int = DEFAULT_LEVELS,
        graders: Optional[Sequence[str]] = None,
    ):
        if n_levels < 2:
            raise ModelError("need at least two rating levels")
        for r in ratings:
            check_rating(r, n_levels)
        self.n_levels = n_levels
        self.graders = tuple(graders) if graders is not None else tuple(sorted({r.grader_id for r in ratings}))
        self.exercises = tuple(sorted({r.exercise_id for r in ratings}))
        self.students = tuple(sorted({r.student_id for r in ratings}))
        gidx = {g: i for i, g in enumerate(self.graders)}
        eidx = {e: i for i, e in enumerate(self.exercises)}
        sidx = {s: i for i, s in enumerate(self.students)}
        unknown = sorted({r.grader_id for r in ratings} - set(gidx))
        if unknown:
            raise ModelError(f"ratings reference unknown grader(s) {', '.join(unknown)}")
        self.answer_ids = tuple(r.answer_id for r in ratings)
        self.grader = np.array([gidx[r.grader_id] for r in ratings], dtype=np.int64)
        self.exercise = np.array([eidx[r.exercise_id] for r in ratings], dtype=np.int64)
        self.student = np.array([sidx[r.student_id] for r in ratings], dtype=np.int64)
        self.y = np.array([r.y - 1 for r in ratings], dtype=np.int64)
        self.score = np.array([r.score for r in ratings], dtype=float)
        self.total = np.array([r.total for r in ratings], dtype=float)
        self.correct = np.array([r.correct for r in ratings], dtype=np.int64)

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class ModelParams:
    """Constrained view of one parameter vector."""

    grader_effect: np.ndarray
    exercise_effect: np.ndarray
    student_effect: np.ndarray
    score_slope: float
    total_slope: float
    cutpoints: np.ndarray
    grader_mean: Optional[np.ndarray] = None


class OrderedProbitModel:
    """Log posterior and its gradient over the unconstrained parameter vector.

    ``split=True`` gives each grader separate factors for correctly and
    incorrectly answered items, each pair drawn around a per-grader mean.
    ``cutpoint_prior="ordered"`` puts the Normal prior on the cutpoint values
    themselves (adding the log-Jacobian of the increment transform) instead of
    on their unconstrained representation.
    """

    def __init__(
        self,
        data: RatingData,
        split: bool = False,
        prior_sd: float = PRIOR_SD,
        hyper_sd: float = HYPER_SD,
        cutpoint_prior: str = "unconstrained",
        likelihood_weight: float = 1.0,
    ):
        if cutpoint_prior not in ("unconstrained", "ordered"):
            raise ModelError(f"unknown cutpoint prior {cutpoint_prior!r}")
        self.data = data
        self.split = split
        self.prior_sd = float(prior_sd)
        self.hyper_sd = float(hyper_sd)
        self.cutpoint_prior = cutpoint_prior
        self.likelihood_weight = float(likelihood_weight)
        G, E, S, K = len(data.graders), len(data.exercises), len(data.students), data.n_levels
        sizes = [
            ("grader", 2 * G if split else G),
            ("grader_mean", G if split else 0),
            ("exercise", E),
            ("student", S),
            ("score_slope", 1),
            ("total_slope", 1),
            ("cut", K - 1),
        ]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start
        self._effect_index = data.grader * 2 + data.correct if split else data.grader
        self._n_effects = sizes[0][1]

    # -- layout ------------------------------------------------------------

    def names(self) -> list[str]:
        d = self.data
        out = []
        if self.split:
            for g in d.graders:
                out += [f"grader[{g}|incorrect]", f"grader[{g}|correct]"]
            out += [f"grader_mean[{g}]" for g in d.graders]
        else:
            out += [f"grader[{g}]" for g in d.graders]
        out += [f"exercise[{e}]" for e in d.exercises]
        out += [f"student[{s}]" for s in d.students]
        out += ["score_slope", "total_slope", "cut[1]"]
        out += [f"cut_logdiff[{k}]" for k in range(2, d.n_levels)]
        return out

    def cutpoints(self, theta: np.ndarray) -> np.ndarray:
        raw = theta[self.slices["cut"]]
        steps = np.concatenate(([raw[0]], np.exp(raw[1:])))
        return np.cumsum(steps)

    def unconstrain_cutpoints(self, cutpoints: Sequence[float]) -> np.ndarray:
        c = np.asarray(cutpoints, dtype=float)
        if np.any(np.diff(c) <= 0):
            raise ModelError("cutpoints must be strictly increasing")
        return np.concatenate(([c[0]], np.log(np.diff(c))))

    def unpack(self, theta: np.ndarray) -> ModelParams:
        effect = theta[self.slices["grader"]]
        if self.split:
            effect = effect.reshape(-1, 2)
        return ModelParams(
            grader_effect=effect.copy(),
            exercise_effect=theta[self.slices["exercise"]].copy(),
            student_effect=theta[self.slices["student"]].copy(),
            score_slope=float(theta[self.slices["score_slope"]][0]),
            total_slope=float(theta[self.slices["total_slope"]][0]),
            cutpoints=self.cutpoints(theta),
            grader_mean=theta[self.slices["grader_mean"]].copy() if self.split else None,
        )

    def pack(self, params: ModelParams) -> np.ndarray:
        theta = np.zeros(self.dim)
        theta[self.slices["grader"]] = np.ravel(params.grader_effect)
        if self.split:
            theta[self.slices["grader_mean"]] = params.grader_mean
        theta[self.slices["exercise"]] = params.exercise_effect
        theta[self.slices["student"]] = params.student_effect
        theta[self.slices["score_slope"]] = params.score_slope
        theta[self.slices["total_slope"]] = params.total_slope
        theta[self.slices["cut"]] = self.unconstrain_cutpoints(params.cutpoints)
        return theta

    # -- densities ---------------------------------------------------------

    def latent_mean(self, theta: np.ndarray) -> np.ndarray:
        d = self.data
        s = self.slices
        return (
            theta[s["grader"]][self._effect_index]
            + theta[s["exercise"]][d.exercise]
            + theta[s["student"]][d.student]
            + theta[s["score_slope"]][0] * d.score
            + theta[s["total_slope"]][0] * d.total
        )

    def latent_mean_without_grader(self, theta: np.ndarray) -> np.ndarray:
        return self.latent_mean(theta) - theta[self.slices["grader"]][self._effect_index]

    def log_likelihood(self, theta: np.ndarray) -> float:
        if len(self.data) == 0:
            return 0.0
        ll, _, _ = _kernels.ordered_probit_terms(self.latent_mean(theta), self.data.y, self.cutpoints(theta))
        return ll

    def _normal_terms(self, x, mean, sd):
        z = (x - mean) / sd
        return -0.5 * z * z - math.log(sd) - _LOG_SQRT_2PI

    def log_prior(self, theta: np.ndarray) -> float:
        return self._prior_and_grad(theta)[0]

    def _prior_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        s = self.slices
        sd = self.prior_sd
        grad = np.zeros(self.dim)
        plain = np.ones(self.dim, dtype=bool)
        lp = 0.0
        if self.split:
            plain[s["grader"]] = False
            effects = theta[s["grader"]].reshape(-1, 2)
            means = theta[s["grader_mean"]]
            dev = effects - means[:, None]
            lp += float(np.sum(self._normal_terms(effects, means[:, None], self.hyper_sd)))
            g_effects = -dev / self.hyper_sd**2
            grad[s["grader"]] = g_effects.ravel()
            grad[s["grader_mean"]] += -g_effects.sum(axis=1)
        if self.cutpoint_prior == "ordered":
            plain[s["cut"]] = False
            raw = theta[s["cut"]]
            c = self.cutpoints(theta)
            lp += float(np.sum(self._normal_terms(c, 0.0, sd))) + float(np.sum(raw[1:]))
            g_c = -c / sd**2
            tail = np.cumsum(g_c[::-1])[::-1]
            g_raw = np.empty_like(raw)
            g_raw[0] = tail[0]
            g_raw[1:] = np.exp(raw[1:]) * tail[1:] + 1.0
            grad[s["cut"]] = g_raw
        x = theta[plain]
        lp += float(np.sum(self._normal_terms(x, 0.0, sd)))
        grad[plain] += -x / sd**2
        return lp, grad

    def log_posterior(self, theta: np.ndarray) -> float:
        return self.likelihood_weight * self.log_likelihood(theta) + self.log_prior(theta)

    def log_posterior_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Log posterior and its analytic gradient in unconstrained space."""
        lp, grad = self._prior_and_grad(theta)
        d = self.data
        if len(d) == 0 or self.likelihood_weight == 0.0:
            return lp, grad
        s = self.slices
        w = self.likelihood_weight
        raw = theta[s["cut"]]
        ll, d_latent, dcut = _kernels.ordered_probit_terms(self.latent_mean(theta), d.y, self.cutpoints(theta))
        grad[s["grader"]] += w * np.bincount(self._effect_index, weights=d_latent, minlength=self._n_effects)
        grad[s["exercise"]] += w * np.bincount(d.exercise, weights=d_latent, minlength=len(d.exercises))
        grad[s["student"]] += w * np.bincount(d.student, weights=d_latent, minlength=len(d.students))
        grad[s["score_slope"]] += w * float(d_latent @ d.score)
        grad[s["total_slope"]] += w * float(d_latent @ d.total)
        tail = np.cumsum(dcut[::-1])[::-1]
        g_raw = np.empty_like(raw)
        g_raw[0] = tail[0]
        g_raw[1:] = np.exp(raw[1:]) * tail[1:]
        grad[s["cut"]] += w * g_raw
        return lp + w * ll, grad

    def grad_log_posterior(self, theta: np.ndarray) -> np.ndarray:
        return self.log_posterior_and_grad(theta)[1]


def ordered_probit_pmf(latent, cutpoints) -> np.ndarray:
    """Category probabilities, shape (len(latent), len(cutpoints) + 1)."""
    latent = np.atleast_1d(np.asarray(latent, dtype=float))
    return np.exp(_kernels.ordered_probit_logpmf(latent, np.asarray(cutpoints, dtype=float)))


def log_likelihood(model: OrderedProbitModel, theta: np.ndarray) -> float:
    return model.log_likelihood(theta)


def log_prior(model: OrderedProbitModel, theta: np.ndarray) -> float:
    return model.log_prior(theta)


def grad_log_posterior(model: OrderedProbitModel, theta: np.ndarray) -> np.ndarray:
    return model.grad_log_posterior(theta)
