"""Grader contrasts against a reference grader, and posterior output files."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import _kernels
from .model import OrderedProbitModel
from .sampler import PosteriorDraws

MAX_CONTEXT_DRAWS = 200


@dataclass(frozen=True)
class ContrastSummary:
    grader: str
    group: str
    mean: float
    low: float
    high: float
    p_higher: float
    p_higher_low: float
    p_higher_high: float
    p_lower: float
    p_lower_low: float
    p_lower_high: float
    n_contexts: int


def _interval(x: np.ndarray) -> tuple[float, float, float]:
    lo, hi = np.quantile(x, [0.025, 0.975])
    return float(x.mean()), float(lo), float(hi)


def _comparison_probs(pmf_g: np.ndarray, pmf_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-context P(Y_g > Y_ref) and P(Y_g < Y_ref) for independent ratings."""
    cdf_ref = np.cumsum(pmf_ref, axis=1)
    below = np.concatenate([np.zeros((cdf_ref.shape[0], 1)), cdf_ref[:, :-1]], axis=1)
    higher = np.sum(pmf_g * below, axis=1)
    lower = np.sum(pmf_g * (1.0 - cdf_ref), axis=1)
    return higher, lower


def _effect_column(model: OrderedProbitModel, names: list, grader: str, group: str) -> int:
    key = f"grader[{grader}]" if group == "all" else f"grader[{grader}|{group}]"
    return names.index(key)


def contrasts_vs_reference(
    draws: PosteriorDraws,
    model: OrderedProbitModel,
    reference: str,
    max_context_draws: int = MAX_CONTEXT_DRAWS,
) -> list[ContrastSummary]:
    """Posterior of the grader effect minus the reference effect, with probability shifts.

    Probability shifts average, over observed rating contexts and thinned
    posterior draws, the change in the chance that an independent rating under
    grader g is higher (lower) than one under the reference, relative to the
    reference compared with itself.  Both shifts are exactly zero for the
    reference grader.
    """
    graders = list(model.data.graders)
    if reference not in graders:
        raise KeyError(f"unknown reference grader {reference!r}")
    flat = draws.flat()
    names = draws.names
    thin = np.unique(np.linspace(0, flat.shape[0] - 1, min(max_context_draws, flat.shape[0])).astype(int))
    groups = ["incorrect", "correct"] if model.split else ["all"]
    correct = model.data.correct.astype(bool)
    results = []
    base_cache = {}
    for d in thin:
        theta = flat[d]
        base_cache[d] = (model.latent_mean_without_grader(theta), model.cutpoints(theta))
    for group in groups:
        if group == "all":
            mask = np.ones(len(model.data), dtype=bool)
        else:
            mask = correct == (group == "correct")
        ref_col = _effect_column(model, names, reference, group)
        for grader in graders:
            col = _effect_column(model, names, grader, group)
            diff = flat[:, col] - flat[:, ref_col]
            higher = np.zeros(len(thin))
            lower = np.zeros(len(thin))
            if mask.any() and grader != reference:
                for j, d in enumerate(thin):
                    base, cut = base_cache[d]
                    ctx = base[mask]
                    pmf_ref = np.exp(_kernels.ordered_probit_logpmf(ctx + flat[d, ref_col], cut))
                    pmf_g = np.exp(_kernels.ordered_probit_logpmf(ctx + flat[d, col], cut))
                    h_g, l_g = _comparison_probs(pmf_g, pmf_ref)
                    h_r, l_r = _comparison_probs(pmf_ref, pmf_ref)
                    higher[j] = np.mean(h_g - h_r)
                    lower[j] = np.mean(l_g - l_r)
            results.append(
                ContrastSummary(
                    grader, group, *_interval(diff), *_interval(higher), *_interval(lower), int(mask.sum())
                )
            )
    return results


def contrast_draws(draws: PosteriorDraws, grader: str, reference: str, group: str = "all") -> np.ndarray:
    suffix = "" if group == "all" else f"|{group}"
    return draws.column(f"grader[{grader}{suffix}]") - draws.column(f"grader[{reference}{suffix}]")


# --------------------------------------------------------------------------
# Output files
# --------------------------------------------------------------------------


def _provenance_cols(provenance: Optional[dict]) -> tuple[list, list]:
    if not provenance:
        return [], []
    return ["config_hash", "seeds"], [provenance.get("config_hash", ""), provenance.get("seeds_text", "")]


def write_posterior_csv(draws: PosteriorDraws, path, provenance: Optional[dict] = None) -> None:
    extra_h, extra_v = _provenance_cols(provenance)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "draw"] + list(draws.names) + extra_h)
        for c in range(draws.n_chains):
            for i in range(draws.n_draws):
                writer.writerow([c, i] + [repr(float(v)) for v in draws.draws[c, i]] + extra_v)


def write_contrasts_csv(summaries: Sequence[ContrastSummary], path, reference: str, provenance: Optional[dict] = None) -> None:
    extra_h, extra_v = _provenance_cols(provenance)
    names = list(ContrastSummary.__dataclass_fields__)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["reference"] + names + extra_h)
        for s in summaries:
            row = [reference] + [f"{v:.6f}" if isinstance(v, float) else v for v in asdict(s).values()]
            writer.writerow(row + extra_v)


def diagnostics_text(draws: PosteriorDraws, provenance: Optional[dict] = None) -> str:
    lines = [
        f"sampler: {draws.sampler}",
        f"seed: {draws.seed}",
        f"chains: {draws.n_chains}",
        f"draws per chain: {draws.n_draws}",
        "acceptance: " + ", ".join(f"{a:.3f}" for a in draws.accept_rate),
        "step size: " + ", ".join(f"{s:.4g}" for s in draws.step_size),
        f"divergences: {int(draws.divergences.sum())} ({draws.divergence_rate:.2%})",
        f"max R-hat: {np.nanmax(draws.rhat):.4f}",
    ]
    if provenance:
        lines.append(f"config hash: {provenance.get('config_hash', '')}")
        lines.append(f"seeds: {provenance.get('seeds_text', '')}")
    lines.append("status: " + ("FLAGGED" if draws.warnings else "ok"))
    lines += [f"warning: {w}" for w in draws.warnings]
    lines.append("")
    lines.append("parameter R-hat:")
    lines += [f"  {name}: {r:.4f}" for name, r in zip(draws.names, draws.rhat)]
    return "\n".join(lines) + "\n"
