"""How many samples pin down a Gaussian mean to within q standard deviations."""

from __future__ import annotations

import math
from dataclasses import dataclass

# Acklam's rational approximation to the normal quantile (relative error ~1.15e-9)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425

TABLE_ROWS = ((0.05, 0.05), (0.06, 0.06), (0.07, 0.07), (0.08, 0.08), (0.10, 0.10), (0.15, 0.15))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _acklam_lower(u: float) -> float:
    # valid for u <= 0.5
    if u < _P_LOW:
        t = math.sqrt(-2.0 * math.log(u))
        num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
        den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1.0
        return num / den
    t = u - 0.5
    r = t * t
    num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * t
    den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    return num / den


def inverse_normal_cdf(u: float) -> float:
    """Standard normal quantile: rational approximation plus one Newton step on erfc."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"probability {u} outside (0, 1)")
    if u > 0.5:
        return -inverse_normal_cdf(1.0 - u)
    x = _acklam_lower(u)
    err = normal_cdf(x) - u
    return x - err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)


@dataclass(frozen=True)
class SampleSizeQuery:
    p: float
    q: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0 or not 0.0 < self.q <= 1.0:
            raise ValueError(f"need 0 < p < 1 and 0 < q <= 1, got p={self.p}, q={self.q}")


def required_n(query: SampleSizeQuery) -> int:
    """Smallest n with P(|mean_n - mu| > q*sigma) < p for normal data."""
    z = inverse_normal_cdf(1.0 - query.p / 2.0)
    return math.ceil((z / query.q) ** 2)


def format_table(rows=TABLE_ROWS) -> str:
    lines = [f"{'p':>6} {'q':>6} {'n':>6}"]
    for p, q in rows:
        lines.append(f"{p:>6.2f} {q:>6.2f} {required_n(SampleSizeQuery(p, q)):>6d}")
    return "\n".join(lines)
