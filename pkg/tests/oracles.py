"""Independent reference implementations used by the tests.

Nothing here imports the library's evaluation code: expressions are generated
as trees and interpreted directly, metrics are naive loops, and the
ordered-probit PMF uses ``math.erf``.
"""

from __future__ import annotations

import itertools
import math
import random
from fractions import Fraction

# ---------------------------------------------------------------- expressions


def random_points(gen: random.Random) -> Fraction:
    return Fraction(gen.randint(0, 20), 20)


def random_tree(gen: random.Random, labels: list, depth: int = 0):
    """Nested tuple tree: ('num', Fraction) | ('ref', L) | (op, [children])."""
    if depth >= 3 or gen.random() < 0.35:
        if labels and gen.random() < 0.7:
            return ("ref", gen.choice(labels))
        return ("num", Fraction(gen.randint(0, 8), 4))
    op = gen.choice(["+", "*", "min", "max"])
    return (op, [random_tree(gen, labels, depth + 1) for _ in range(gen.randint(2, 3))])


def tree_text(node) -> str:
    kind = node[0]
    if kind == "num":
        v = node[1]
        return str(v.numerator) if v.denominator == 1 else f"{float(v):g}"
    if kind == "ref":
        return node[1]
    parts = [tree_text(c) for c in node[1]]
    if kind in ("min", "max"):
        return f"{kind}({', '.join(parts)})"
    return "(" + f" {kind} ".join(parts) + ")"


def tree_value(node, bindings: dict) -> Fraction:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "ref":
        return bindings[node[1]]
    vals = [tree_value(c, bindings) for c in node[1]]
    if kind == "+":
        return sum(vals, Fraction(0))
    if kind == "*":
        out = Fraction(1)
        for v in vals:
            out *= v
        return out
    return min(vals) if kind == "min" else max(vals)


def subsets(labels):
    for r in range(len(labels) + 1):
        yield from (frozenset(c) for c in itertools.combinations(labels, r))


def brute_force_score(points: dict, tree, satisfied: frozenset) -> Fraction:
    bindings = {lab: (p if lab in satisfied else Fraction(0)) for lab, p in points.items()}
    if tree is None:
        return sum(bindings.values(), Fraction(0))
    return tree_value(tree, bindings)


# ---------------------------------------------------------------- metrics


def naive_metrics(gold: dict, predicted: dict, labels_of: dict):
    """CA, mean and population std of the per-criterion grading difference, by loops."""
    agree = total = 0
    diffs = []
    for answer in sorted(gold):
        if answer not in predicted:
            continue
        labels = labels_of[answer]
        count = 0
        for lab in labels:
            g = lab in gold[answer]
            p = lab in predicted[answer]
            total += 1
            if g == p:
                agree += 1
            count += int(p) - int(g)
        diffs.append(Fraction(count, len(labels)))
    mean = sum(diffs, Fraction(0)) / len(diffs)
    var = Fraction(0)
    for d in diffs:
        var += (d - mean) ** 2
    var /= len(diffs)
    return Fraction(agree, total), mean, var


# ---------------------------------------------------------------- ordered probit


def std_normal_cdf(x: float) -> float:
    if x == math.inf:
        return 1.0
    if x == -math.inf:
        return 0.0
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def probit_pmf(latent: float, cutpoints) -> list:
    edges = [-math.inf, *cutpoints, math.inf]
    return [std_normal_cdf(edges[k + 1] - latent) - std_normal_cdf(edges[k] - latent) for k in range(len(edges) - 1)]


def normal_logpdf(x: float, sd: float) -> float:
    return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * (x / sd) ** 2


def random_eval_fixture(gen: random.Random):
    """Random gold/predicted criterion sets over 1-4 exercises of 1-6 criteria."""
    n_ex = gen.randint(1, 4)
    labels_of_ex = {f"e{i}": [chr(65 + j) for j in range(gen.randint(1, 6))] for i in range(n_ex)}
    gold, predicted, labels_of, answer_exercise = {}, {}, {}, {}
    for i in range(gen.randint(1, 40)):
        ex = gen.choice(sorted(labels_of_ex))
        aid = f"a{i}"
        labels = labels_of_ex[ex]
        gold[aid] = frozenset(lab for lab in labels if gen.random() < 0.5)
        predicted[aid] = frozenset(lab for lab in labels if gen.random() < 0.5)
        labels_of[aid] = labels
        answer_exercise[aid] = ex
    return labels_of_ex, gold, predicted, labels_of, answer_exercise
