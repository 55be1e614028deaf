"""Elementwise truncated-normal density, sampler and score on a finite interval.

All functions broadcast over ``x``, ``mean`` and ``std``.  The normalizer
``log(Phi(b) - Phi(a))`` is evaluated in whichever tail keeps it accurate.
"""
from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _log1mexp(x: np.ndarray) -> np.ndarray:
    # log(1 - exp(x)) for x <= 0
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _std_bounds(mean, std, lo, hi):
    return (lo - mean) / std, (hi - mean) / std


def log_normalizer(mean, std, lo=0.0, hi=1.0) -> np.ndarray:
    """``log(Phi((hi-mean)/std) - Phi((lo-mean)/std))``."""
    a, b = _std_bounds(np.asarray(mean, float), np.asarray(std, float), lo, hi)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    lower = b <= 0  # both bounds in the lower tail
    upper = a >= 0  # both bounds in the upper tail
    mid = ~(lower | upper)
    if lower.any():
        lb, la = log_ndtr(b[lower]), log_ndtr(a[lower])
        out[lower] = lb + _log1mexp(la - lb)
    if upper.any():
        la, lb = log_ndtr(-a[upper]), log_ndtr(-b[upper])
        out[upper] = la + _log1mexp(lb - la)
    if mid.any():
        out[mid] = np.log1p(-ndtr(a[mid]) - ndtr(-b[mid]))
    return out


def logpdf(x, mean, std, lo=0.0, hi=1.0) -> np.ndarray:
    """Log-density; ``-inf`` outside ``[lo, hi]``."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    z = (x - mean) / std
    out = -0.5 * z * z - np.log(std) - _LOG_SQRT_2PI - log_normalizer(mean, std, lo, hi)
    return np.where((x >= lo) & (x <= hi), out, -np.inf)


def sample(mean, std, rng: np.random.Generator, lo=0.0, hi=1.0, size=None) -> np.ndarray:
    """Inverse-CDF sampler; one uniform draw per output element."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    shape = np.broadcast_shapes(mean.shape, std.shape) if size is None else size
    u = rng.random(shape)
    a, b = _std_bounds(mean, std, lo, hi)
    # reflect bounds lying wholly in the upper tail so ndtr keeps precision
    flip = a >= 0
    a_, b_ = np.where(flip, -b, a), np.where(flip, -a, b)
    pa, pb = ndtr(a_), ndtr(b_)
    z = ndtri(pa + u * (pb - pa))
    z = np.where(flip, -z, z)
    return np.clip(mean + std * z, lo, hi)


def score(x, mean, std, lo=0.0, hi=1.0):
    """Partial derivatives of ``logpdf`` with respect to ``mean`` and ``std``."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    z = (x - mean) / std
    a, b = _std_bounds(mean, std, lo, hi)
    log_z = log_normalizer(mean, std, lo, hi)
    # phi(bound) / Z, computed in log space
    pa = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_z)
    pb = np.exp(-0.5 * b * b - _LOG_SQRT_2PI - log_z)
    d_mean = z / std - (pa - pb) / std
    d_std = (z * z - 1.0) / std - (a * pa - b * pb) / std
    return d_mean, d_std
