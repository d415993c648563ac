"""Two-sided paired t-test with explicit degenerate-variance handling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import special

from ..core import DomainError


def t_cdf(t: float, dof: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    x = dof / (dof + t * t)
    tail = 0.5 * special.betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


@dataclass
class ComparisonReport:
    a: list[float]
    b: list[float]
    t: float
    p: float
    dof: int
    mean_diff: float
    direction: str  # "a>b", "a<b" or "tie"
    degenerate: bool = False
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def paired_ttest(a: Sequence[float], b: Sequence[float], label: str = "") -> ComparisonReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("paired t-test needs two 1-D vectors of equal length")
    n = a.size
    if n < 2:
        raise DomainError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    direction = "a>b" if mean > 0 else "a<b" if mean < 0 else "tie"
    if sd == 0.0:
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        return ComparisonReport(a.tolist(), b.tolist(), t, 1.0 if mean == 0 else 0.0, n - 1, mean, direction, True, label)
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = float(special.betainc(dof / 2.0, 0.5, dof / (dof + t * t)))  # = 2 * (1 - cdf(|t|))
    return ComparisonReport(a.tolist(), b.tolist(), t, float(min(max(p, 0.0), 1.0)), n - 1, mean, direction, False, label)
