from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradekit.prompts import GradedExample
from gradekit.sampler import MAX_EXAMPLES, group_by_signature, sample


def ex(i, satisfied):
    return GradedExample(f"text {i}", frozenset(satisfied), Fraction(0), "", "e")


def test_grouping_by_signature():
    groups = group_by_signature([ex(0, "A"), ex(1, "A"), ex(2, "AB"), ex(3, "")])
    assert [len(g.members) for g in groups] == [2, 1, 1]
    assert group_by_signature([]) == []
    assert len(group_by_signature([ex(i, "AB") for i in range(8)])) == 1


def test_exhaustion_and_zero():
    pool = [ex(i, "A" if i % 2 else "B") for i in range(4)]
    chosen = sample(pool, 10, seed=5)
    assert sorted(e.text for e in chosen) == sorted(e.text for e in pool)
    assert sample(pool, 0, seed=5) == []


def test_cap_enforced():
    with pytest.raises(ValueError):
        sample([ex(0, "A")], MAX_EXAMPLES + 1, seed=0)


def test_same_seed_same_selection():
    pool = [ex(i, "ABCD"[i % 4] * (i % 3)) for i in range(40)]
    assert sample(pool, 6, 99) == sample(pool, 6, 99)
    assert any(sample(pool, 6, 99) != sample(pool, 6, s) for s in range(100, 105))


def test_uniform_over_groups_monte_carlo():
    pool = [ex(i, "A") for i in range(100)] + [ex(100, "B")]
    trials = 20000
    hits = sum(sample(pool, 1, seed)[0].text == "text 100" for seed in range(trials))
    # exact probability is 1/2; 4 sigma at this n is about 0.014
    assert abs(hits / trials - 0.5) < 0.015


examples_st = st.lists(st.sets(st.sampled_from("ABCD")), max_size=40).map(
    lambda sets: [ex(i, s) for i, s in enumerate(sets)]
)


@given(examples_st, st.integers(0, MAX_EXAMPLES), st.integers(0, 2**63))
def test_sampling_properties(pool, k, seed):
    chosen = sample(pool, k, seed)
    assert len(chosen) == min(k, len(pool)) <= MAX_EXAMPLES
    assert len({e.text for e in chosen}) == len(chosen)
    n_groups = len(group_by_signature(pool))
    if k >= n_groups:
        assert {e.satisfied for e in chosen} == {g.signature for g in group_by_signature(pool)}
