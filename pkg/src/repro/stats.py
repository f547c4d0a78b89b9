"""Small-sample nonparametric statistics for the timing comparisons.

Implements the two tests used to judge recording overhead: the two-sided
Wilcoxon rank-sum test and Cliff's Delta effect size.  Sample sizes here
are tiny (a handful of timed runs per side), so the rank-sum null
distribution is enumerated exactly when feasible — ties included, via
midranks — and only falls back to the tie-corrected normal approximation
for larger inputs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import List, Sequence

__all__ = [
    "rank_sum_test",
    "cliffs_delta",
    "delta_magnitude",
    "RankSumResult",
]

# Full enumeration of C(n+m, n) subsets stays comfortably fast up to here.
_EXACT_LIMIT = 20


def _midranks(values: Sequence[float]) -> List[float]:
    """Ranks 1..N with tied values sharing their average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        # Positions i..j (0-based) share ranks i+1..j+1.
        shared = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            ranks[order[k]] = shared
        i = j + 1
    return ranks


@dataclass(frozen=True)
class RankSumResult:
    statistic: float       # rank sum of the first sample
    p_value: float
    exact: bool            # enumerated null distribution vs normal approx


def rank_sum_test(x: Sequence[float], y: Sequence[float]) -> RankSumResult:
    """Two-sided Wilcoxon rank-sum test of x against y.

    For n+m up to 20 the p-value is exact: every way of assigning the
    combined midranks to the first sample is enumerated and the two-sided
    p is twice the smaller tail (capped at 1).  Beyond that, the normal
    approximation with tie-corrected variance is used.
    """
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("rank-sum test needs at least two samples per side")
    combined = list(x) + list(y)
    ranks = _midranks(combined)
    observed = sum(ranks[:n])
    total = n + m

    if total <= _EXACT_LIMIT:
        at_most = 0
        at_least = 0
        count = 0
        # Midranks are exact multiples of 0.5, so float sums compare exactly.
        for subset in itertools.combinations(range(total), n):
            stat = sum(ranks[i] for i in subset)
            count += 1
            if stat <= observed:
                at_most += 1
            if stat >= observed:
                at_least += 1
        p = min(1.0, 2.0 * min(at_most, at_least) / count)
        return RankSumResult(statistic=observed, p_value=p, exact=True)

    mean = n * (total + 1) / 2.0
    tie_term = 0.0
    seen = {}
    for v in combined:
        seen[v] = seen.get(v, 0) + 1
    for t in seen.values():
        tie_term += t ** 3 - t
    variance = (n * m / 12.0) * (total + 1 - tie_term / (total * (total - 1)))
    if variance == 0:
        return RankSumResult(statistic=observed, p_value=1.0, exact=False)
    z = (observed - mean) / math.sqrt(variance)
    p = math.erfc(abs(z) / math.sqrt(2))
    return RankSumResult(statistic=observed, p_value=p, exact=False)


def cliffs_delta(x: Sequence[float], y: Sequence[float]) -> float:
    """Cliff's Delta: P(x > y) - P(x < y) over all cross pairs.

    Positive values mean the first sample tends to be larger; +1 / -1 mean
    complete separation.
    """
    if not x or not y:
        raise ValueError("Cliff's Delta needs non-empty samples")
    greater = 0
    less = 0
    for a in x:
        for b in y:
            if a > b:
                greater += 1
            elif a < b:
                less += 1
    return (greater - less) / (len(x) * len(y))


def delta_magnitude(delta: float) -> str:
    """Conventional magnitude label for a Cliff's Delta value."""
    size = abs(delta)
    if size < 0.147:
        return "negligible"
    if size < 0.33:
        return "small"
    if size < 0.474:
        return "medium"
    return "large"
