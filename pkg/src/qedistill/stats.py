"""Paired t-test with Student-t p-values via the regularized incomplete beta.

Self-contained so run comparisons need no stats dependency; accuracy is
pinned against an independent reference implementation in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

_MAX_ITER = 300
_EPS = 3e-16
_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with `dof` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if t == 0.0:
        return 1.0
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: str | None = None  # "all-zero-differences" or "zero-variance"


def paired_t_test(
    a: list[float], b: list[float], alternative: str = "two-sided"
) -> TTestResult:
    """Paired t-test on per-query values; `a` and `b` are aligned samples.

    t = mean(d) / (sd(d) / sqrt(n)) on d = a - b with sample sd (n - 1 dof).
    `alternative` is "two-sided", "greater" (a > b) or "less".
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative: {alternative!r}")
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = [x - y for x, y in zip(a, b)]
    mean_d = sum(d) / n
    var = sum((x - mean_d) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        if mean_d == 0.0:
            return TTestResult(t=0.0, p=1.0, n=n, degenerate="all-zero-differences")
        t = math.inf if mean_d > 0 else -math.inf
        p_two = 0.0
        result = TTestResult(t=t, p=p_two, n=n, degenerate="zero-variance")
        return _apply_alternative(result, alternative)
    t = mean_d / math.sqrt(var / n)
    p_two = student_t_two_sided_p(t, n - 1)
    return _apply_alternative(TTestResult(t=t, p=p_two, n=n), alternative)


def _apply_alternative(result: TTestResult, alternative: str) -> TTestResult:
    if alternative == "two-sided":
        return result
    positive = result.t > 0
    if alternative == "greater":
        p = result.p / 2.0 if positive else 1.0 - result.p / 2.0
    else:  # less
        p = result.p / 2.0 if not positive else 1.0 - result.p / 2.0
    return TTestResult(t=result.t, p=p, n=result.n, degenerate=result.degenerate)
