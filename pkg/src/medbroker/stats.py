"""Survey statistics: Pearson chi-square on 2x2 contingency tables plus
descriptive frequency/percentage tabulation.

The chi-square statistic uses the margin form

    X^2 = N (ad - bc)^2 / ((a+b)(c+d)(a+c)(b+d))

with *no* continuity correction, one degree of freedom, and the p-value
from the upper tail of the chi-square distribution. The survival function
is computed through the regularized upper incomplete gamma function
Q(df/2, x/2), implemented here with the classic series / continued
fraction pair so the result carries close to machine precision.

Percentages are reported to one decimal with half-up rounding, matching
how survey tables are conventionally printed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .domain import BrokerError

ALPHA = 0.05


class DegenerateMarginError(BrokerError):
    """A zero margin makes the chi-square statistic undefined."""


class StatsDomainError(BrokerError):
    pass


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Counts laid out as rows = factor-1 levels, columns = factor-2 levels:

        |        | col 1 | col 2 |
        | row 1  |   a   |   b   |
        | row 2  |   c   |   d   |
    """

    a: int
    b: int
    c: int
    d: int
    row_factor: str = ""
    col_factor: str = ""
    row_labels: Tuple[str, str] = ("row1", "row2")
    col_labels: Tuple[str, str] = ("col1", "col2")

    def __post_init__(self) -> None:
        for name, value in (("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d)):
            if value < 0 or int(value) != value:
                raise StatsDomainError(f"count {name} must be a non-negative integer, got {value}")

    @property
    def total(self) -> int:
        return self.a + self.b + self.c + self.d

    @property
    def margins(self) -> Tuple[int, int, int, int]:
        return (self.a + self.b, self.c + self.d, self.a + self.c, self.b + self.d)


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    df: int
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value <= ALPHA


@dataclass(frozen=True)
class FrequencyRow:
    label: str
    count: int
    percent: float  # already rounded to 1 decimal, half-up


@dataclass(frozen=True)
class FrequencyTable:
    rows: Tuple[FrequencyRow, ...]
    base: int


@dataclass(frozen=True)
class DescriptiveSummary:
    mean: float
    sd: float
    minimum: float
    maximum: float


def pearson_chi_square(table: ContingencyTable2x2) -> ChiSquareResult:
    """Pearson chi-square for a 2x2 table, without continuity correction."""
    r1, r2, c1, c2 = table.margins
    if min(r1, r2, c1, c2) == 0:
        raise DegenerateMarginError(
            f"degenerate margins {table.margins}: every margin must be positive"
        )
    n = table.total
    diff = table.a * table.d - table.b * table.c
    statistic = n * diff * diff / (r1 * r2 * c1 * c2)
    return ChiSquareResult(statistic=statistic, df=1, p_value=chi_square_sf(statistic, 1))


def chi_square_sf(x: float, df: int) -> float:
    """Upper-tail probability P(X >= x) for a chi-square with ``df`` dof."""
    if x < 0:
        raise StatsDomainError(f"chi-square statistic must be non-negative, got {x}")
    if df < 1:
        raise StatsDomainError(f"degrees of freedom must be >= 1, got {df}")
    if x == 0:
        return 1.0
    q = _upper_regularized_gamma(df / 2.0, x / 2.0)
    return min(1.0, max(q, 0.0))


def _upper_regularized_gamma(s: float, x: float) -> float:
    """Q(s, x) = Gamma(s, x) / Gamma(s) for s > 0, x >= 0."""
    if x < s + 1.0:
        return 1.0 - _lower_gamma_series(s, x)
    return _upper_gamma_contfrac(s, x)


def _lower_gamma_series(s: float, x: float, eps: float = 1e-16, max_iter: int = 1000) -> float:
    # P(s, x) by the power series around zero.
    if x == 0.0:
        return 0.0
    ap = s
    term = 1.0 / s
    total = term
    for _ in range(max_iter):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * eps:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _upper_gamma_contfrac(s: float, x: float, eps: float = 1e-16, max_iter: int = 1000) -> float:
    # Q(s, x) by the Lentz-evaluated continued fraction; converges for x > s+1.
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return math.exp(-x + s * math.log(x) - math.lgamma(s)) * h


def round_half_up(value: float, decimals: int = 1) -> float:
    quantum = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def tabulate(counts: Mapping[str, int], base: Optional[int] = None) -> FrequencyTable:
    """Counts -> percentages of ``base`` (default: the counts' own sum).

    An explicit base supports multi-response questions, where each option
    is an independent share of the respondent pool and the percentage
    column legitimately sums past 100.
    """
    if not counts:
        raise StatsDomainError("cannot tabulate an empty set of counts")
    n = base if base is not None else sum(counts.values())
    if n <= 0:
        raise StatsDomainError(f"tabulation base must be positive, got {n}")
    rows = tuple(
        FrequencyRow(label=label, count=count, percent=round_half_up(100.0 * count / n))
        for label, count in counts.items()
    )
    return FrequencyTable(rows=rows, base=n)


def describe(values: Sequence[float]) -> DescriptiveSummary:
    """Mean, sample standard deviation (N-1), min, and max."""
    n = len(values)
    if n < 2:
        raise StatsDomainError(f"describe needs at least 2 values, got {n}")
    mean = math.fsum(values) / n
    variance = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return DescriptiveSummary(
        mean=mean, sd=math.sqrt(variance), minimum=min(values), maximum=max(values)
    )
