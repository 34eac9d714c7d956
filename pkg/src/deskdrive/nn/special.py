"""Special functions backing the Beta-distribution KL divergence.

log_gamma uses the Lanczos approximation (g=7, 9 coefficients); digamma and
trigamma use an 8-step recurrence lift followed by the Bernoulli asymptotic
series, giving better than 1e-10 relative accuracy on (0, 1e4).
"""
from __future__ import annotations

import numpy as np


class DomainError(ValueError):
    """Raised when a special function is evaluated outside its domain."""


_LANCZOS_G = 7.0
_LANCZOS_C = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_TWO_PI = 0.9189385332046727  # 0.5 * ln(2 pi)

# psi(y) ~ ln y - 1/(2y) - sum b_k / y^(2k), asymptotic Bernoulli tail
_DIGAMMA_TAIL = (1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0,
                 1.0 / 132.0, -691.0 / 32760.0, 1.0 / 12.0)
# psi'(y) ~ 1/y + 1/(2y^2) + sum b_k / y^(2k+1)
_TRIGAMMA_TAIL = (1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0,
                  5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0)
_LIFT = 8  # recurrence steps before switching to the asymptotic series


def _check_positive(x: np.ndarray, fn: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x <= 0.0):
        raise DomainError(f"{fn} requires positive finite arguments")
    return x


def _lanczos_log_gamma(z: np.ndarray) -> np.ndarray:
    # valid for z >= 0.5
    acc = np.full_like(z, _LANCZOS_C[0])
    for i in range(1, len(_LANCZOS_C)):
        acc = acc + _LANCZOS_C[i] / (z - 1.0 + i)
    t = z + _LANCZOS_G - 0.5
    return _HALF_LOG_TWO_PI + (z - 0.5) * np.log(t) - t + np.log(acc)


def log_gamma(x) -> np.ndarray | float:
    """ln Gamma(x) for x > 0."""
    x = _check_positive(x, "log_gamma")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = x < 0.5
    if np.any(small):
        xs = x[small]
        # reflection: ln Gamma(x) = ln(pi / sin(pi x)) - ln Gamma(1 - x)
        out[small] = (np.log(np.pi / np.sin(np.pi * xs))
                      - _lanczos_log_gamma(1.0 - xs))
    if np.any(~small):
        out[~small] = _lanczos_log_gamma(x[~small])
    return float(out[0]) if scalar else out


def digamma(x) -> np.ndarray | float:
    """psi(x) = d/dx ln Gamma(x) for x > 0."""
    x = _check_positive(x, "digamma")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    acc = np.zeros_like(x)
    for k in range(_LIFT):
        acc -= 1.0 / (x + k)
    y = x + _LIFT
    inv2 = 1.0 / (y * y)
    tail = np.zeros_like(x)
    p = inv2
    for b in _DIGAMMA_TAIL:
        tail -= b * p
        p = p * inv2
    out = acc + np.log(y) - 0.5 / y + tail
    return float(out[0]) if scalar else out


def trigamma(x) -> np.ndarray | float:
    """psi'(x) for x > 0."""
    x = _check_positive(x, "trigamma")
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    acc = np.zeros_like(x)
    for k in range(_LIFT):
        acc += 1.0 / ((x + k) * (x + k))
    y = x + _LIFT
    inv = 1.0 / y
    inv2 = inv * inv
    tail = np.zeros_like(x)
    p = inv * inv2
    for b in _TRIGAMMA_TAIL:
        tail += b * p
        p = p * inv2
    out = acc + inv + 0.5 * inv2 + tail
    return float(out[0]) if scalar else out


def log_beta(a, b):
    """ln B(a, b)."""
    return log_gamma(a) + log_gamma(b) - log_gamma(np.asarray(a, float) + b)


def beta_kl(a1, b1, a2, b2):
    """KL(Beta(a1, b1) || Beta(a2, b2)), elementwise.

    Closed form via log-gamma and digamma; raises DomainError on
    non-positive parameters.
    """
    a1 = _check_positive(a1, "beta_kl")
    b1 = _check_positive(b1, "beta_kl")
    a2 = _check_positive(a2, "beta_kl")
    b2 = _check_positive(b2, "beta_kl")
    s1 = a1 + b1
    out = (log_beta(a2, b2) - log_beta(a1, b1)
           + (a1 - a2) * digamma(a1)
           + (b1 - b2) * digamma(b1)
           + (a2 - a1 + b2 - b1) * digamma(s1))
    return out


def beta_kl_grad(a1, b1, a2, b2):
    """Partials of beta_kl w.r.t. the first distribution's (a1, b1)."""
    a1 = np.asarray(a1, dtype=np.float64)
    b1 = np.asarray(b1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    b2 = np.asarray(b2, dtype=np.float64)
    tg_sum = trigamma(a1 + b1)
    common = (a2 - a1 + b2 - b1) * tg_sum
    da = (a1 - a2) * trigamma(a1) + common
    db = (b1 - b2) * trigamma(b1) + common
    return da, db
