"""Hot numeric kernels: ordered-probit likelihood terms and bootstrap statistics.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one.  The
numba path is used when numba imports cleanly and ``GRADEKIT_DISABLE_NUMBA`` is
unset (or ``0``).  Both paths are always importable as ``numba_*`` / ``numpy_*``
so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import log_ndtr as _sp_log_ndtr

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT1_2 = 1.0 / math.sqrt(2.0)

STAT_MEAN = 0
STAT_STD = 1

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _flag_disabled() -> bool:
    value = os.environ.get("GRADEKIT_DISABLE_NUMBA", "").strip().lower()
    return value not in ("", "0", "false", "no")


USING_NUMBA = HAVE_NUMBA and not _flag_disabled()


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------


def _numpy_log_diff_ndtr(a, b):
    """log(Phi(b) - Phi(a)) for a < b elementwise, stable in both tails."""
    out = np.empty(np.broadcast(a, b).shape)
    left = b <= 0
    right = a >= 0
    mid = ~(left | right)
    with np.errstate(divide="ignore", invalid="ignore"):
        lb = _sp_log_ndtr(b[left])
        out[left] = lb + np.log1p(-np.exp(_sp_log_ndtr(a[left]) - lb))
        la = _sp_log_ndtr(-a[right])
        out[right] = la + np.log1p(-np.exp(_sp_log_ndtr(-b[right]) - la))
        out[mid] = np.log1p(-(np.exp(_sp_log_ndtr(a[mid])) + np.exp(_sp_log_ndtr(-b[mid]))))
    return out


def _bounds(latent, y, cut):
    k = cut.shape[0] + 1
    ext = np.concatenate(([-np.inf], cut, [np.inf]))
    a = ext[y] - latent
    b = ext[y + 1] - latent
    return a, b, k


def numpy_ordered_probit_terms(latent, y, cut):
    """Log-likelihood sum, d/d(latent) per rating and d/d(cutpoint) totals.

    ``y`` holds 0-based categories in ``0..len(cut)``.
    """
    a, b, _ = _bounds(latent, y, cut)
    logp = _numpy_log_diff_ndtr(a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        phi_a = np.where(np.isfinite(a), np.exp(-0.5 * a * a - _LOG_SQRT_2PI - logp), 0.0)
        phi_b = np.where(np.isfinite(b), np.exp(-0.5 * b * b - _LOG_SQRT_2PI - logp), 0.0)
    d_latent = phi_a - phi_b
    m = cut.shape[0]
    dcut = np.bincount(y[y < m], weights=phi_b[y < m], minlength=m)[:m]
    dcut -= np.bincount(y[y > 0] - 1, weights=phi_a[y > 0], minlength=m)[:m]
    return float(logp.sum()), d_latent, dcut


def numpy_ordered_probit_logpmf(latent, cut):
    """Matrix of log P(y = k | latent) with shape (len(latent), len(cut) + 1)."""
    latent = np.asarray(latent, dtype=float)
    ext = np.concatenate(([-np.inf], cut, [np.inf]))
    a = ext[None, :-1] - latent[:, None]
    b = ext[None, 1:] - latent[:, None]
    return _numpy_log_diff_ndtr(a, b)


def numpy_bootstrap_stat(data, idx, stat):
    sample = data[idx]
    if stat == STAT_MEAN:
        return sample.mean(axis=1)
    if stat == STAT_STD:
        return sample.std(axis=1)
    raise ValueError(f"unknown statistic code {stat}")


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------


def _log_ndtr_scalar(x):
    if x > 6.0:
        return math.log1p(-0.5 * math.erfc(x * _SQRT1_2))
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x * _SQRT1_2))
    # asymptotic expansion of the lower tail
    x2 = x * x
    inv = 1.0 / x2
    series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv * (1.0 - 9.0 * inv))))
    return -0.5 * x2 - math.log(-x) - _LOG_SQRT_2PI + math.log(series)


def _log_diff_ndtr_scalar(a, b):
    if b <= 0.0:
        lb = _log_ndtr_scalar(b)
        la = -math.inf if a == -math.inf else _log_ndtr_scalar(a)
        return lb + math.log1p(-math.exp(la - lb))
    if a >= 0.0:
        la = _log_ndtr_scalar(-a)
        lb = -math.inf if b == math.inf else _log_ndtr_scalar(-b)
        return la + math.log1p(-math.exp(lb - la))
    pa = 0.0 if a == -math.inf else 0.5 * math.erfc(-a * _SQRT1_2)
    pb = 0.0 if b == math.inf else 0.5 * math.erfc(b * _SQRT1_2)
    return math.log1p(-(pa + pb))


def _terms_loop(latent, y, cut):
    n = latent.shape[0]
    m = cut.shape[0]
    d_latent = np.empty(n)
    dcut = np.zeros(m)
    total = 0.0
    for i in range(n):
        k = y[i]
        a = -math.inf if k == 0 else cut[k - 1] - latent[i]
        b = math.inf if k == m else cut[k] - latent[i]
        logp = _log_diff_ndtr_scalar(a, b)
        total += logp
        pa = 0.0
        pb = 0.0
        if k > 0:
            pa = math.exp(-0.5 * a * a - _LOG_SQRT_2PI - logp)
            dcut[k - 1] -= pa
        if k < m:
            pb = math.exp(-0.5 * b * b - _LOG_SQRT_2PI - logp)
            dcut[k] += pb
        d_latent[i] = pa - pb
    return total, d_latent, dcut


def _logpmf_loop(latent, cut):
    n = latent.shape[0]
    m = cut.shape[0]
    out = np.empty((n, m + 1))
    for i in range(n):
        for k in range(m + 1):
            a = -math.inf if k == 0 else cut[k - 1] - latent[i]
            b = math.inf if k == m else cut[k] - latent[i]
            out[i, k] = _log_diff_ndtr_scalar(a, b)
    return out


def _bootstrap_loop(data, idx, stat):
    bsz, n = idx.shape
    out = np.empty(bsz)
    for r in range(bsz):
        s = 0.0
        for j in range(n):
            s += data[idx[r, j]]
        mean = s / n
        if stat == 0:
            out[r] = mean
        else:
            ss = 0.0
            for j in range(n):
                d = data[idx[r, j]] - mean
                ss += d * d
            out[r] = math.sqrt(ss / n)
    return out


if HAVE_NUMBA:
    _log_ndtr_scalar = numba.njit(cache=True)(_log_ndtr_scalar)
    _log_diff_ndtr_scalar = numba.njit(cache=True)(_log_diff_ndtr_scalar)
    _numba_terms = numba.njit(cache=True)(_terms_loop)
    _numba_logpmf = numba.njit(cache=True)(_logpmf_loop)
    _numba_bootstrap = numba.njit(cache=True)(_bootstrap_loop)
else:  # pragma: no cover
    _numba_terms = _terms_loop
    _numba_logpmf = _logpmf_loop
    _numba_bootstrap = _bootstrap_loop


def numba_ordered_probit_terms(latent, y, cut):
    total, d_latent, dcut = _numba_terms(
        np.ascontiguousarray(latent, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        np.ascontiguousarray(cut, dtype=np.float64),
    )
    return float(total), d_latent, dcut


def numba_ordered_probit_logpmf(latent, cut):
    return _numba_logpmf(
        np.ascontiguousarray(latent, dtype=np.float64), np.ascontiguousarray(cut, dtype=np.float64)
    )


def numba_bootstrap_stat(data, idx, stat):
    if stat not in (STAT_MEAN, STAT_STD):
        raise ValueError(f"unknown statistic code {stat}")
    return _numba_bootstrap(
        np.ascontiguousarray(data, dtype=np.float64), np.ascontiguousarray(idx, dtype=np.int64), stat
    )


if USING_NUMBA:
    ordered_probit_terms = numba_ordered_probit_terms
    ordered_probit_logpmf = numba_ordered_probit_logpmf
    bootstrap_stat = numba_bootstrap_stat
else:
    ordered_probit_terms = numpy_ordered_probit_terms
    ordered_probit_logpmf = numpy_ordered_probit_logpmf
    bootstrap_stat = numpy_bootstrap_stat
