"""Bayesian ordered-probit analysis of student satisfaction ratings."""

from .analysis import ContrastSummary, contrast_draws, contrasts_vs_reference
from .model import OrderedProbitModel, Rating, RatingData, load_ratings, ordered_probit_pmf, write_ratings
from .sampler import PosteriorDraws, SamplerConfig, sample_posterior
from .simulate import simulate_ratings

__all__ = [
    "ContrastSummary",
    "OrderedProbitModel",
    "PosteriorDraws",
    "Rating",
    "RatingData",
    "SamplerConfig",
    "contrast_draws",
    "contrasts_vs_reference",
    "load_ratings",
    "ordered_probit_pmf",
    "sample_posterior",
    "simulate_ratings",
    "write_ratings",
]
