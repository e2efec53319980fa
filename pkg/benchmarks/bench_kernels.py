"""Time the numba kernels against their pure-numpy counterparts.

Run with ``python3 benchmarks/bench_kernels.py``.  Both paths are imported
side by side, so the ``GRADEKIT_DISABLE_NUMBA`` flag does not matter here;
it only selects which path the library uses.
"""

from __future__ import annotations

import timeit

import click
import numpy as np

from gradekit import _kernels


def _cases(n_ratings: int, n_boot: int, n_data: int, seed: int):
    gen = np.random.default_rng(seed)
    latent = gen.normal(0, 1.5, n_ratings)
    cut = np.array([-1.5, -0.5, 0.5, 1.5])
    y = gen.integers(0, 5, n_ratings)
    data = (gen.random(n_data) < 0.9).astype(float)
    idx = gen.integers(0, n_data, (n_boot, n_data))
    return {
        "ordered_probit_terms": (lambda impl: impl(latent, y, cut), "ordered_probit_terms"),
        "ordered_probit_logpmf": (lambda impl: impl(latent, cut), "ordered_probit_logpmf"),
        "bootstrap_std": (lambda impl: impl(data, idx, _kernels.STAT_STD), "bootstrap_stat"),
    }


@click.command()
@click.option("--ratings", default=20000, show_default=True, help="Ratings per likelihood call.")
@click.option("--resamples", default=2000, show_default=True, help="Bootstrap resamples.")
@click.option("--size", default=500, show_default=True, help="Bootstrap sample size.")
@click.option("--repeat", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def main(ratings, resamples, size, repeat, seed):
    if not _kernels.HAVE_NUMBA:
        raise click.ClickException("numba is not installed")
    click.echo(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (call, attr) in _cases(ratings, resamples, size, seed).items():
        fast = getattr(_kernels, f"numba_{attr}")
        slow = getattr(_kernels, f"numpy_{attr}")
        call(fast)  # compile outside the timing
        t_fast = min(timeit.repeat(lambda: call(fast), number=1, repeat=repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: call(slow), number=1, repeat=repeat)) * 1e3
        click.echo(f"{name:<24}{t_slow:>12.2f}{t_fast:>12.2f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
