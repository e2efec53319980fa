import numpy as np
import pytest

from gradekit.prefs import (
    OrderedProbitModel,
    RatingData,
    SamplerConfig,
    contrast_draws,
    contrasts_vs_reference,
    sample_posterior,
    simulate_ratings,
)
from gradekit.prefs.sampler import split_rhat, warmup_windows

SMALL = SamplerConfig(iterations=400, warmup=200, chains=2, seed=3)


@pytest.fixture(scope="module")
def fitted():
    ratings = simulate_ratings(300, {"ta": 0.0, "llm": 0.6, "other": -0.4}, n_students=8, n_exercises=3, seed=1)
    model = OrderedProbitModel(RatingData(ratings, graders=["ta", "llm", "other"]))
    return model, sample_posterior(model, SMALL)


def test_same_seed_same_draws(fitted):
    model, draws = fitted
    again = sample_posterior(model, SMALL)
    assert np.array_equal(draws.draws, again.draws)
    other = sample_posterior(model, SamplerConfig(iterations=400, warmup=200, chains=2, seed=4))
    assert not np.array_equal(draws.draws, other.draws)


def test_draw_shapes_and_names(fitted):
    model, draws = fitted
    assert draws.draws.shape == (2, 200, model.dim)
    assert draws.names == model.names()
    assert np.all(draws.rhat < 1.1)


def test_reference_contrast_is_exactly_zero(fitted):
    model, draws = fitted
    summaries = {s.grader: s for s in contrasts_vs_reference(draws, model, "ta", max_context_draws=20)}
    ref = summaries["ta"]
    assert (ref.mean, ref.low, ref.high, ref.p_higher, ref.p_lower) == (0.0, 0.0, 0.0, 0.0, 0.0)
    assert summaries["llm"].mean > summaries["other"].mean
    assert summaries["llm"].p_higher > 0 > summaries["llm"].p_lower


def test_contrast_antisymmetry(fitted):
    _, draws = fitted
    np.testing.assert_array_equal(contrast_draws(draws, "llm", "ta"), -contrast_draws(draws, "ta", "llm"))


def test_unknown_reference(fitted):
    model, draws = fitted
    with pytest.raises(KeyError):
        contrasts_vs_reference(draws, model, "nobody")


def test_prior_only_recovers_prior_scale():
    ratings = simulate_ratings(20, {"a": 0.0, "b": 0.0}, n_students=2, n_exercises=1, seed=0)
    model = OrderedProbitModel(RatingData(ratings), likelihood_weight=0.0)
    draws = sample_posterior(model, SamplerConfig(iterations=1500, warmup=500, chains=2, seed=1))
    sd = draws.flat().std(axis=0)
    assert np.all(np.abs(sd - 2.0) < 0.25)
    assert np.all(np.abs(draws.flat().mean(axis=0)) < 0.3)


def test_random_walk_fallback_runs():
    ratings = simulate_ratings(20, {"a": 0.0}, n_students=2, n_exercises=1, seed=0)
    model = OrderedProbitModel(RatingData(ratings), likelihood_weight=0.0)
    draws = sample_posterior(model, SamplerConfig(iterations=3000, warmup=1000, chains=2, seed=1, sampler="rwm"))
    assert draws.sampler == "rwm" and np.all((draws.accept_rate > 0.05) & (draws.accept_rate < 0.9))


def test_split_rhat():
    gen = np.random.default_rng(0)
    assert np.all(np.abs(split_rhat(gen.normal(size=(4, 500, 3))) - 1) < 0.02)
    stuck = gen.normal(size=(4, 500, 1)) + np.arange(4)[:, None, None] * 5
    assert split_rhat(stuck)[0] > 1.5


def test_warmup_windows_cover_warmup():
    windows = warmup_windows(1000)
    assert windows[0][0] >= 0 and windows[-1][1] <= 1000
    assert all(a < b for a, b in windows)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(iterations=100, warmup=100)
    with pytest.raises(ValueError):
        SamplerConfig(metric="full")
