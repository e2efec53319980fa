"""Diversity-seeking selection of graded examples for the prompt.

Examples are grouped by their criteria signature (the exact set of satisfied
criteria).  Draws proceed in rounds: each draw picks uniformly among the
non-exhausted groups not yet used in the current round, then an unused member
of that group uniformly at random.  Every group is therefore represented once
``k`` reaches the number of groups.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Sequence

from .prompts import GradedExample

MAX_EXAMPLES = 10


@dataclass(frozen=True)
class SignatureGroup:
    signature: frozenset
    members: tuple


def group_by_signature(examples: Sequence[GradedExample]) -> list[SignatureGroup]:
    """Partition examples by satisfied set, groups ordered by first appearance."""
    buckets: dict[frozenset, list] = {}
    for ex in examples:
        buckets.setdefault(frozenset(ex.satisfied), []).append(ex)
    return [SignatureGroup(sig, tuple(members)) for sig, members in buckets.items()]


def sample_groups(groups: Sequence[SignatureGroup], k: int, seed: int) -> list[GradedExample]:
    if k > MAX_EXAMPLES:
        raise ValueError(f"at most {MAX_EXAMPLES} examples may be sampled, got k={k}")
    if k < 0:
        raise ValueError("k must be non-negative")
    rand = random.Random(seed)
    pools = [list(g.members) for g in groups if g.members]
    chosen = []
    while len(chosen) < k and pools:
        round_order = list(range(len(pools)))
        while round_order and len(chosen) < k:
            gi = round_order.pop(rand.randrange(len(round_order)))
            pool = pools[gi]
            chosen.append(pool.pop(rand.randrange(len(pool))))
        pools = [p for p in pools if p]
    return chosen


def sample(examples: Sequence[GradedExample], k: int, seed: int) -> list[GradedExample]:
    """Pick up to ``k`` examples (k <= 10) in draw order; deterministic given ``seed``."""
    return sample_groups(group_by_signature(examples), k, seed)
