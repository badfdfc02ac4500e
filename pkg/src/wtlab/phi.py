"""Stable evaluation of exponential-integrator weight functions.

Everything here is a small, branch-safe helper used by the time steppers
and Duhamel quadratures.  Arguments may be scalars or arrays.
"""
from __future__ import annotations

import numpy as np

_SMALL = 1e-5


def phi1(x):
    """(1 - exp(-x)) / x, continued through x = 0.

    Valid for negative arguments as well; a short Taylor series is used
    below ``1e-5`` where the direct formula loses digits.
    """
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SMALL
    xs = np.where(small, 1.0, x)  # keep the divide well-defined
    direct = -np.expm1(-xs) / xs
    series = 1.0 - x / 2.0 + x * x / 6.0
    out = np.where(small, series, direct)
    return out if out.ndim else float(out)


def exp_trapezoid_weights(theta):
    """Weights (w0, w1) of the exponentially weighted trapezoid rule.

    For the step integral  int_0^h exp(-gamma (h - x)) y(x) dx  with y
    linear on the step and theta = gamma * h, the rule is
    h * (w0 * y(0) + w1 * y(h)).  w0 + w1 = phi1(theta); both reduce to
    1/2 as theta -> 0 (plain trapezoid).
    """
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < _SMALL
    ts = np.where(small, 1.0, theta)
    e = np.exp(-ts)
    w0_direct = (1.0 - (1.0 + ts) * e) / (ts * ts)
    w1_direct = (ts - 1.0 + e) / (ts * ts)
    w0_series = 0.5 - theta / 3.0 + theta * theta / 8.0
    w1_series = 0.5 - theta / 6.0 + theta * theta / 24.0
    w0 = np.where(small, w0_series, w0_direct)
    w1 = np.where(small, w1_series, w1_direct)
    if w0.ndim:
        return w0, w1
    return float(w0), float(w1)


def exp_diff_quotient(a, b, tau):
    """(exp(a*tau) - exp(b*tau)) / (a - b) without cancellation or overflow.

    Requires a, b <= 0 (all uses here have non-positive exponents).
    Continued through a == b where the value is tau * exp(a*tau).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    hi = np.maximum(a, b)
    gap = np.abs(a - b) * tau
    return np.exp(hi * tau) * tau * phi1(gap)
