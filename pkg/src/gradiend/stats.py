"""Pearson correlation and percentile bootstrap."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np


class UndefinedCorrelation(ValueError):
    """Raised when one of the inputs has zero variance."""


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance: correlation undefined")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    boot_mean: float
    ci_low: float
    ci_high: float
    n: int

    def as_row(self) -> dict:
        return asdict(self)


def bootstrap(values, statistic: Callable[[np.ndarray], float] = np.mean, resamples: int = 1000,
              ci_level: float = 0.95, seed: int = 0, name: str = "metric") -> MetricReport:
    """Percentile bootstrap of ``statistic`` over rows of ``values``.

    ``values`` may be 1-D or 2-D (rows resampled together, e.g. paired
    data).  The reported interval is widened to include the bootstrap mean,
    which it always does except in degenerate skewed cases.
    """
    data = np.asarray(values, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("bootstrap needs at least one value")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if not 0 < ci_level < 1:
        raise ValueError("ci_level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(data)
    stats = np.empty(resamples)
    for b in range(resamples):
        stats[b] = statistic(data[rng.integers(0, n, size=n)])
    alpha = (1.0 - ci_level) / 2
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    mean = float(stats.mean())
    return MetricReport(name, float(statistic(data)), mean, float(min(lo, mean)), float(max(hi, mean)), n)
