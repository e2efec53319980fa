import os
import subprocess
import sys

import numpy as np
import pytest

from gradekit import _kernels
from oracles import probit_pmf


@pytest.fixture
def ratings():
    gen = np.random.default_rng(0)
    latent = gen.normal(0, 3, 400)
    latent[:4] = [-40.0, 40.0, -9.0, 9.0]  # deep tails
    return latent, gen.integers(0, 5, 400), np.array([-1.5, -0.5, 0.5, 1.5])


def test_terms_parity(ratings):
    latent, y, cut = ratings
    a = _kernels.numba_ordered_probit_terms(latent, y, cut)
    b = _kernels.numpy_ordered_probit_terms(latent, y, cut)
    assert a[0] == pytest.approx(b[0], rel=1e-10)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-8, atol=1e-12)
    assert np.all(np.isfinite(a[1]))


def test_logpmf_parity_and_oracle(ratings):
    latent, _, cut = ratings
    a = _kernels.numba_ordered_probit_logpmf(latent, cut)
    b = _kernels.numpy_ordered_probit_logpmf(latent, cut)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    for m, row in zip(latent[4:40], np.exp(a[4:40])):
        np.testing.assert_allclose(row, probit_pmf(m, cut), atol=1e-12)


@pytest.mark.parametrize("stat", [_kernels.STAT_MEAN, _kernels.STAT_STD])
def test_bootstrap_parity(stat):
    gen = np.random.default_rng(1)
    data = gen.random(60)
    idx = gen.integers(0, 60, (200, 60))
    np.testing.assert_allclose(_kernels.numba_bootstrap_stat(data, idx, stat), _kernels.numpy_bootstrap_stat(data, idx, stat), rtol=1e-12)
    expected = data[idx].mean(axis=1) if stat == _kernels.STAT_MEAN else data[idx].std(axis=1)
    np.testing.assert_allclose(_kernels.numpy_bootstrap_stat(data, idx, stat), expected, rtol=1e-12)


def test_env_flag_selects_numpy_path():
    code = "from gradekit import _kernels as k; print(k.USING_NUMBA, k.ordered_probit_terms is k.numpy_ordered_probit_terms)"
    env = dict(os.environ, GRADEKIT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
    env["GRADEKIT_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["True", "False"]
