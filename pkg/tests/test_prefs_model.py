import math

import numpy as np
import pytest

from gradekit.prefs import OrderedProbitModel, Rating, RatingData, load_ratings, ordered_probit_pmf, simulate_ratings, write_ratings
from gradekit.prefs.model import ModelError, ModelParams
from oracles import normal_logpdf, probit_pmf, std_normal_cdf

CUT = (-1.5, -0.5, 0.5, 1.5)


def one_rating(y=3, grader="g"):
    return Rating("a", "s", "e", grader, y, 0.0, 0.0, False)


def test_pmf_worked_example():
    pmf = ordered_probit_pmf([0.0], CUT)[0]
    assert math.log(pmf[2]) == pytest.approx(math.log(std_normal_cdf(0.5) - std_normal_cdf(-0.5)), abs=1e-12)
    assert pmf[2] == pytest.approx(0.38292, abs=1e-5)


def test_pmf_sums_to_one_randomized():
    gen = np.random.default_rng(0)
    for _ in range(200):
        cut = np.sort(gen.normal(0, 2, gen.integers(1, 7)))
        latent = gen.normal(0, 4, 50)
        pmf = ordered_probit_pmf(latent, cut)
        assert np.all(np.abs(pmf.sum(axis=1) - 1) < 1e-12)
        np.testing.assert_allclose(pmf[0], probit_pmf(latent[0], cut), atol=1e-12)


def model_at_zero(ratings, **kwargs):
    model = OrderedProbitModel(RatingData(ratings), **kwargs)
    theta = model.pack(ModelParams(np.zeros(len(model.data.graders)), np.zeros(1), np.zeros(1), 0.0, 0.0, np.array(CUT)))
    return model, theta


def test_log_likelihood_single_rating():
    model, theta = model_at_zero([one_rating(3)])
    assert model.log_likelihood(theta) == pytest.approx(math.log(0.38292492254802624), abs=1e-12)


def test_prior_matches_independent_normals():
    model, theta = model_at_zero([one_rating(3)])
    expected = sum(normal_logpdf(x, 2.0) for x in theta)
    assert model.log_prior(theta) == pytest.approx(expected, abs=1e-12)
    assert model.log_prior(-theta) == pytest.approx(model.log_prior(theta), abs=1e-12)


def test_grader_shift_changes_mean():
    model, theta = model_at_zero([one_rating(3)])
    shifted = theta.copy()
    shifted[model.slices["grader"]] = -0.125
    assert model.latent_mean(shifted)[0] - model.latent_mean(theta)[0] == pytest.approx(-0.125)


def finite_difference(fn, theta, h=1e-5):
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2 * h)
    return grad


@pytest.mark.parametrize("split,cut_prior", [(False, "unconstrained"), (True, "unconstrained"), (False, "ordered")])
def test_gradient_matches_finite_differences(split, cut_prior):
    ratings = simulate_ratings(120, {"g1": 0.0, "g2": 0.5, "g3": -0.3}, n_students=6, n_exercises=3, seed=4)
    model = OrderedProbitModel(RatingData(ratings), split=split, cutpoint_prior=cut_prior)
    gen = np.random.default_rng(1)
    for _ in range(5):
        theta = gen.normal(0, 0.7, model.dim)
        analytic = model.grad_log_posterior(theta)
        numeric = finite_difference(model.log_posterior, theta)
        assert np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(numeric))) < 1e-5


def test_location_shift_invariance():
    ratings = simulate_ratings(50, {"g1": 0.0, "g2": 0.5}, n_students=4, n_exercises=2, seed=2)
    model = OrderedProbitModel(RatingData(ratings))
    theta = np.random.default_rng(3).normal(0, 0.5, model.dim)
    shifted = theta.copy()
    shifted[model.slices["grader"]] += 0.7
    shifted[model.slices["cut"].start] += 0.7  # first cutpoint; later ones follow via increments
    assert model.log_likelihood(shifted) == pytest.approx(model.log_likelihood(theta), abs=1e-9)


def test_unrated_grader_has_prior_only_gradient():
    ratings = [one_rating(2), Rating("b", "t", "e", "g", 4, 1.0, 0.5, True)]
    model = OrderedProbitModel(RatingData(ratings, graders=["g", "idle"]))
    theta = np.random.default_rng(0).normal(0, 1, model.dim)
    idle = model.names().index("grader[idle]")
    assert model.grad_log_posterior(theta)[idle] == pytest.approx(-theta[idle] / 4.0, abs=1e-14)
    prior_only = OrderedProbitModel(model.data, likelihood_weight=0.0)
    np.testing.assert_allclose(prior_only.grad_log_posterior(theta), -theta / 4.0)


def test_pack_unpack_round_trip():
    ratings = simulate_ratings(30, {"g1": 0.0, "g2": 0.5}, n_students=3, n_exercises=2, seed=1)
    model = OrderedProbitModel(RatingData(ratings), split=True)
    theta = np.random.default_rng(0).normal(size=model.dim)
    np.testing.assert_allclose(model.pack(model.unpack(theta)), theta, atol=1e-12)
    assert np.all(np.diff(model.cutpoints(theta)) > 0)
    assert len(model.names()) == model.dim


def test_rating_validation_and_csv(tmp_path):
    with pytest.raises(ModelError):
        RatingData([one_rating(6)])
    with pytest.raises(ModelError):
        RatingData([one_rating(3, "x")], graders=["g"])
    ratings = simulate_ratings(10, {"g1": 0.0}, seed=0)
    write_ratings(tmp_path / "r.csv", ratings)
    assert load_ratings(tmp_path / "r.csv") == ratings
    (tmp_path / "bad.csv").write_text("answer_id,student_id\n")
    with pytest.raises(ModelError, match="missing column"):
        load_ratings(tmp_path / "bad.csv")
