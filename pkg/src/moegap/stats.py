"""Small-sample statistics: Student-t CDF, Pearson correlation, paired t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

NORMAL_975 = 1.959963985
BETACF_TOL = 1e-12
BETACF_MAX_ITER = 10_000
_TINY = 1e-300


class SampleSizeError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


class DegenerateTestError(ValueError):
    pass


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs 0 <= x <= 1, got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only on one side of the mean; use symmetry on the other
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _t_tail(t: float, df: float) -> float:
    """P(T > |t|)."""
    if math.isinf(t):
        return 0.0
    return 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isnan(t):
        return math.nan
    tail = _t_tail(t, df)
    return tail if t < 0 else 1.0 - tail


def student_t_two_sided_p(t: float, df: float) -> float:
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    return min(1.0, 2.0 * _t_tail(t, df))


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    p_two_sided: float
    ci95_low: float | None
    ci95_high: float | None

    def to_dict(self) -> dict:
        return {"r": self.r, "n": self.n, "p_two_sided": self.p_two_sided,
                "ci95_low": self.ci95_low, "ci95_high": self.ci95_high}


def fisher_ci(r: float, n: int, z_crit: float = NORMAL_975) -> tuple[float, float]:
    """Confidence interval for a correlation via ``atanh``; needs ``n >= 4``."""
    if n < 4:
        raise SampleSizeError(f"Fisher interval needs n >= 4, got {n}")
    if abs(r) >= 1.0:
        return r, r
    z = math.atanh(r)
    half = z_crit / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    """Product-moment correlation with a two-sided t-test p-value and 95% Fisher interval.

    The interval is ``None`` when ``n == 3``.
    """
    n = len(xs)
    if n != len(ys):
        raise ValueError(f"series lengths differ: {n} vs {len(ys)}")
    if n < 3:
        raise SampleSizeError(f"pearson needs n >= 3, got {n}")
    mx, my = math.fsum(xs) / n, math.fsum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))
    if abs(r) == 1.0:
        p = 0.0
    else:
        t = r * math.sqrt((n - 2) / (1.0 - r * r))
        p = student_t_two_sided_p(t, n - 2)
    lo, hi = fisher_ci(r, n) if n >= 4 else (None, None)
    return CorrelationResult(r, n, p, lo, hi)


@dataclass(frozen=True)
class PairedTestResult:
    mean_diff: float
    t_statistic: float
    degrees_freedom: int
    p_two_sided: float
    n: int
    saturated: bool = False

    def to_dict(self) -> dict:
        return {"mean_diff": self.mean_diff, "t_statistic": self.t_statistic,
                "degrees_freedom": self.degrees_freedom, "p_two_sided": self.p_two_sided,
                "n": self.n, "saturated": self.saturated}


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """Two-sided paired t-test on ``a - b``.

    A difference with no spread beyond rounding noise gives an infinite t and
    ``p = 0`` with ``saturated`` set.
    """
    n = len(a)
    if n != len(b):
        raise ValueError(f"paired samples differ in length: {n} vs {len(b)}")
    if n < 2:
        raise SampleSizeError(f"paired t-test needs n >= 2, got {n}")
    d = [x - y for x, y in zip(a, b)]
    if all(v == 0.0 for v in d):
        raise DegenerateTestError("all paired differences are zero")
    mean_d = math.fsum(d) / n
    sd = math.sqrt(math.fsum((v - mean_d) ** 2 for v in d) / (n - 1))
    scale = max(abs(v) for v in d)
    if sd <= 64 * 2.220446049250313e-16 * scale:
        return PairedTestResult(mean_d, math.copysign(math.inf, mean_d), n - 1, 0.0, n, True)
    t = mean_d / (sd / math.sqrt(n))
    return PairedTestResult(mean_d, t, n - 1, student_t_two_sided_p(t, n - 1), n)


class Summary(NamedTuple):
    mean: float
    std: float | None  # sample std; None for a single value


def summarize(values: Sequence[float]) -> Summary:
    n = len(values)
    if n == 0:
        raise SampleSizeError("summarize needs at least one value")
    m = math.fsum(values) / n
    if n == 1:
        return Summary(m, None)
    return Summary(m, math.sqrt(math.fsum((v - m) ** 2 for v in values) / (n - 1)))


def percent_change(baseline: float, treatment: float) -> float:
    return 100.0 * (treatment - baseline) / baseline
