"""Round-wise Beta model of OUI values and the bilateral typicality score."""

from dataclasses import dataclass
from math import exp, isfinite, lgamma, log, log1p

import numpy as np

from ._validation import check_unit_interval
from .exceptions import InputError, NumericError

PARAM_MIN = 1e-3
PARAM_MAX = 1e6
VAR_MIN = 1e-12

CF_TOL = 1e-14
CF_MAX_ITER = 300
_TINY = 1e-300


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        a, b = self.alpha, self.beta
        if not (isfinite(a) and isfinite(b) and a > 0 and b > 0):
            raise InputError(f"Beta parameters must be finite and positive, got ({a}, {b})")

    @property
    def mean(self):
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self):
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))


class _Degenerate:
    """Sentinel for rounds whose OUI values cannot support a Beta fit."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DEGENERATE"

    def __reduce__(self):
        return (_Degenerate, ())


DEGENERATE = _Degenerate()


def fit_beta_moments(samples):
    """Method-of-moments Beta fit.

    Uses the population mean ``m`` and variance ``v`` (``ddof=0``) and returns
    ``BetaParams(m c, (1 - m) c)`` with ``c = m (1 - m) / v - 1``, each clamped
    to ``[1e-3, 1e6]``.  Returns :data:`DEGENERATE` when there are fewer than
    two distinct values, ``v <= 1e-12``, ``m`` is 0 or 1, or the moments are
    infeasible for a Beta law (``v >= m (1 - m)``).
    """
    x = check_unit_interval(samples, name="samples")
    if x.size == 0:
        raise InputError("need at least one sample")
    if np.unique(x).size < 2:
        return DEGENERATE
    m = float(x.mean())
    v = float(np.mean((x - m) ** 2))
    if v <= VAR_MIN or m <= 0.0 or m >= 1.0:
        return DEGENERATE
    c = m * (1.0 - m) / v - 1.0
    if c <= 0.0:
        return DEGENERATE
    clamp = lambda z: min(max(z, PARAM_MIN), PARAM_MAX)  # noqa: E731
    return BetaParams(clamp(m * c), clamp((1.0 - m) * c))


def _betacf(a, b, x, max_iter):
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((qap + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOL:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge in {max_iter} "
                       f"iterations (a={a}, b={b}, x={x})")


def _iteration_cap(a, b):
    # The fraction needs O(sqrt(max(a, b))) terms near the mode: 300 covers
    # parameters up to ~1e5, the clamp ceiling of 1e6 needs ~1000.
    return max(CF_MAX_ITER, int(3.0 * max(a, b) ** 0.5))


def regularized_incomplete_beta(x, p):
    """``I_x(alpha, beta)``, the CDF of ``Beta(alpha, beta)`` at ``x``.

    Raises :class:`NumericError` if the continued fraction fails to converge.
    """
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise InputError(f"x must lie in [0, 1], got {x}")
    a, b = float(p.alpha), float(p.beta)
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (lgamma(a + b) - lgamma(a) - lgamma(b)) + a * log(x) + b * log1p(-x)
    front = exp(log_front)
    cap = _iteration_cap(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        val = front * _betacf(a, b, x, cap) / a
    else:
        val = 1.0 - front * _betacf(b, a, 1.0 - x, cap) / b
    return min(max(val, 0.0), 1.0)


def beta_cdf(x, p):
    """Vectorised convenience wrapper around :func:`regularized_incomplete_beta`."""
    return np.array([regularized_incomplete_beta(v, p) for v in np.atleast_1d(x)])


def beta_median(p, tol=1e-13):
    """Median of ``Beta(alpha, beta)`` by bisection on the CDF."""
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if regularized_incomplete_beta(mid, p) < 0.5:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def bilateral_score(o, p):
    """``2 min(F(o), 1 - F(o))``: 1 at the median, 0 in both tails."""
    f = regularized_incomplete_beta(o, p)
    return 2.0 * min(f, 1.0 - f)


def score_round(oui_values):
    """Fit the round's Beta model and score every client.

    Returns ``(fit, scores)``; on a degenerate fit every score is 1.
    """
    values = check_unit_interval(oui_values, name="oui_values")
    fit = fit_beta_moments(values)
    if fit is DEGENERATE:
        return fit, np.ones(values.size)
    return fit, np.array([bilateral_score(o, fit) for o in values])
