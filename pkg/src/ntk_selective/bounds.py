"""Time-uniform concentration boundaries and elliptical-potential checks.

The stitched boundaries below are the closed forms used by the elimination
thresholds of the model-selection learner. All functions are pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ._validation import check_probability


@dataclass(frozen=True)
class BoundaryQuery:
    """Inputs of a stitched boundary: variance process W, floor m, scale c."""

    variance_process: float
    floor_m: float
    scale_c: float = 0.0
    delta: float = 0.05

    def __post_init__(self):
        if self.floor_m <= 0:
            raise ValueError(f"floor_m must be > 0, got {self.floor_m}")
        if self.variance_process < 0:
            raise ValueError("variance_process must be >= 0")
        if self.scale_c < 0:
            raise ValueError("scale_c must be >= 0")
        check_probability(self.delta, "delta")


def l_term(t: float, delta: float) -> float:
    """log(5.2 * log(2t)^1.4 / delta), the log-log factor of the tests.

    Values can be negative for t = 1 and large delta; they are returned as is.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    check_probability(delta, "delta")
    return math.log(5.2 / delta) + 1.4 * math.log(math.log(2.0 * t))


def _stitch_log_term(q: BoundaryQuery) -> float:
    # inner argument is >= 2, so log log may be negative; kept literally
    ratio = max(q.variance_process / q.floor_m, 1.0)
    return 1.4 * math.log(math.log(2.0 * ratio)) + math.log(5.2 / q.delta)


def hoeffding_boundary(q: BoundaryQuery) -> float:
    """1.44 * sqrt((W v m) * (1.4 loglog(2(W/m v 1)) + log(5.2/delta)))."""
    w = max(q.variance_process, q.floor_m)
    return 1.44 * math.sqrt(w * _stitch_log_term(q))


def bernstein_boundary(q: BoundaryQuery) -> float:
    """Hoeffding boundary plus the sub-Poisson correction 0.41 * c * (...)."""
    return hoeffding_boundary(q) + 0.41 * q.scale_c * _stitch_log_term(q)


def elliptical_sum(increments: Iterable[tuple[float, float]]) -> float:
    return float(sum(min(b, v) for b, v in increments))


def elliptical_check(increments: Iterable[tuple[float, float]], logdet_ratio: float) -> bool:
    """Check sum_t (b ^ ||x_t||^2_{V_{t-1}^-1}) <= (1 + b) log(det V_n / det V_0).

    ``increments`` holds ``(b, squared_norm)`` pairs sharing a single ``b``.
    """
    increments = list(increments)
    if not increments:
        return True
    bs = {b for b, _ in increments}
    if len(bs) != 1:
        raise ValueError("all increments must share the same b")
    (b,) = bs
    # relative slack absorbs float round-off in long running sums
    return elliptical_sum(increments) <= (1.0 + b) * logdet_ratio * (1 + 1e-12) + 1e-12


def elliptical_check_trace(sq_norms: np.ndarray, logdet: float,
                           bs: Iterable[float] = (0.25, 0.5, 1.0)) -> dict[float, bool]:
    """Run :func:`elliptical_check` on the queried squared norms of one run."""
    sq_norms = np.asarray(sq_norms, dtype=float)
    return {b: elliptical_check(((b, v) for v in sq_norms), logdet) for b in bs}
