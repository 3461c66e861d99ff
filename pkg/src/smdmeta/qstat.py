"""Inverse-variance weighted means, the generalized Cochran Q statistic, and
the monotone root solver shared by every moment-type tau^2 estimator."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numkernel import DomainError, NonConvergenceError
from .smd import Study

BRACKET_CAP = 1e7
_REL_TOL = 1e-8
_MAX_BISECT = 400


class BracketCapExceeded(NonConvergenceError):
    """Q stayed above the target all the way to the tau^2 bracket cap."""


@dataclass(frozen=True)
class MetaInput:
    """Ordered collection of K >= 2 studies submitted to estimation."""

    studies: tuple[Study, ...]

    def __post_init__(self):
        if len(self.studies) < 2:
            raise DomainError(f"need K >= 2 studies, got {len(self.studies)}")

    @property
    def k(self) -> int:
        return len(self.studies)

    @cached_property
    def g(self) -> np.ndarray:
        return np.array([s.g for s in self.studies])

    @cached_property
    def v2(self) -> np.ndarray:
        return np.array([s.v2 for s in self.studies])

    @cached_property
    def eff_n(self) -> np.ndarray:
        return np.array([s.eff_n for s in self.studies])

    @cached_property
    def arm_sizes(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.n_t, s.n_c) for s in self.studies)


@dataclass(frozen=True)
class WeightedFit:
    """Weights, weighted mean, and total weight of one fit."""

    weights: np.ndarray
    mean: float
    sum_w: float


@dataclass(frozen=True)
class QRoot:
    value: float
    status: str  # "interior" | "truncated"
    iterations: int


def iv_weighted_mean(data: MetaInput, tau2: float) -> WeightedFit:
    """Inverse-variance weighted mean with weights 1/(v_i^2 + tau2).

    numpy's pairwise summation keeps the K <= ~100 sums well conditioned.
    """
    if tau2 < 0:
        raise DomainError(f"tau2 must be >= 0, got {tau2}")
    w = 1.0 / (data.v2 + tau2)
    sum_w = float(w.sum())
    return WeightedFit(weights=w, mean=float((w * data.g).sum()) / sum_w,
                       sum_w=sum_w)


def q_statistic(data: MetaInput, tau2: float) -> float:
    """Generalized Cochran statistic Q(tau2) = sum w_i (g_i - mean)^2 with the
    mean recomputed at the same tau2.  Non-increasing in tau2."""
    fit = iv_weighted_mean(data, tau2)
    resid = data.g - fit.mean
    return float((fit.weights * resid * resid).sum())


def solve_q_equals(data: MetaInput, target: float) -> QRoot:
    """Solve Q(tau2) = target for tau2 >= 0 on the strictly decreasing branch.

    Returns tau2 = 0 with status "truncated" when Q(0) <= target.  Otherwise
    brackets by doubling and bisects until |Q - target| <= 1e-8 * target.
    Raises BracketCapExceeded if Q is still above target at tau2 = 1e7.
    """
    if not target > 0:
        raise DomainError(f"target must be > 0, got {target}")
    q0 = q_statistic(data, 0.0)
    if q0 <= target:
        return QRoot(0.0, "truncated", 0)

    hi = max(1.0, q0 * float(data.v2.max()))
    lo = 0.0
    while q_statistic(data, hi) >= target:
        lo = hi
        hi *= 2.0
        if hi > BRACKET_CAP:
            raise BracketCapExceeded(
                f"Q({BRACKET_CAP:g}) still >= target {target:g}")

    tol = _REL_TOL * target
    for it in range(1, _MAX_BISECT + 1):
        mid = 0.5 * (lo + hi)
        q = q_statistic(data, mid)
        if abs(q - target) <= tol:
            return QRoot(mid, "interior", it)
        if q > target:
            lo = mid
        else:
            hi = mid
    raise NonConvergenceError(
        f"bisection did not reach |Q - target| <= {tol:g} in {_MAX_BISECT} "
        f"steps; bracket [{lo:g}, {hi:g}]")
