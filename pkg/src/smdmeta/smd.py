"""Study-level standardized mean difference: Hedges's g and its exact sampling model.

A two-arm study with arm sizes (n_t, n_c) and m = n_t + n_c - 2 pooled
degrees of freedom yields the small-sample-unbiased SMD estimate

    g = J(m) * (mean_t - mean_c) / s_pool,

where J(m) is the exact gamma-ratio correction factor.  g follows a scaled
noncentral t distribution, which is also how the simulation lab generates it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numkernel import DomainError, StreamLike, _as_generator, ln_gamma


@dataclass(frozen=True)
class ArmSummary:
    """Size, sample mean and sample SD of one study arm."""

    n: int
    mean: float
    sd: float

    def __post_init__(self):
        if self.n < 2:
            raise DomainError(f"arm size must be >= 2, got {self.n}")
        if self.sd < 0:
            raise DomainError(f"arm sd must be >= 0, got {self.sd}")


@dataclass(frozen=True)
class Study:
    """One study's arm sizes, SMD estimate g, and estimated variance of g."""

    n_t: int
    n_c: int
    g: float
    v2: float

    def __post_init__(self):
        if self.n_t < 2 or self.n_c < 2:
            raise DomainError(
                f"arm sizes must be >= 2, got ({self.n_t}, {self.n_c})")
        if not self.v2 > 0:
            raise DomainError(f"variance of g must be > 0, got {self.v2}")

    @property
    def m(self) -> int:
        return self.n_t + self.n_c - 2

    @property
    def eff_n(self) -> float:
        """Effective sample size n_t*n_c/(n_t+n_c); equals n*q*(1-q)."""
        return self.n_t * self.n_c / (self.n_t + self.n_c)


def j_factor(m: int) -> float:
    """Exact bias-correction factor Gamma(m/2) / (sqrt(m/2) Gamma((m-1)/2)).

    Strictly increasing in m, always in (0, 1); the familiar 1 - 3/(4m - 1)
    is only an approximation and is not used here.
    """
    if m < 2:
        raise DomainError(f"j_factor requires m >= 2, got {m}")
    return math.exp(ln_gamma(m / 2.0) - ln_gamma((m - 1) / 2.0)
                    - 0.5 * math.log(m / 2.0))


def g_variance(g: float, n_t: int, n_c: int) -> float:
    """Unbiased-type estimate of Var(g) from the arm sizes and g itself:

        v2 = (n_t + n_c)/(n_t n_c) + (1 - (m-2)/(m J(m)^2)) g^2
    """
    m = n_t + n_c - 2
    if m < 3:
        raise DomainError(f"g_variance requires n_t + n_c - 2 >= 3, got m={m}")
    j2 = j_factor(m) ** 2
    return (n_t + n_c) / (n_t * n_c) + (1.0 - (m - 2) / (m * j2)) * g * g


def hedges_g(treatment: ArmSummary, control: ArmSummary) -> Study:
    """Hedges's g from two arm summaries, with pooled SD and exact J(m)."""
    n_t, n_c = treatment.n, control.n
    m = n_t + n_c - 2
    s2_pool = ((n_t - 1) * treatment.sd ** 2 + (n_c - 1) * control.sd ** 2) / m
    if not s2_pool > 0:
        raise DomainError("pooled variance is zero; g is undefined")
    g = j_factor(m) * (treatment.mean - control.mean) / math.sqrt(s2_pool)
    return Study(n_t=n_t, n_c=n_c, g=g, v2=g_variance(g, n_t, n_c))


def sample_g(stream: StreamLike, n_t: int, n_c: int, delta_i: float) -> Study:
    """Draw one study exactly from the sampling model of g.

    With effective size ntilde = n_t n_c / (n_t + n_c),

        sqrt(ntilde)/J(m) * g  ~  noncentral-t(df=m, ncp=sqrt(ntilde)*delta_i),

    so g is generated as J(m) * T / sqrt(ntilde) and paired with its
    estimated variance from g_variance.
    """
    if n_t < 2 or n_c < 2:
        raise DomainError(f"arm sizes must be >= 2, got ({n_t}, {n_c})")
    m = n_t + n_c - 2
    eff_n = n_t * n_c / (n_t + n_c)
    gen = _as_generator(stream)
    z = gen.standard_normal()
    x = gen.chisquare(m)
    t = (z + math.sqrt(eff_n) * delta_i) / math.sqrt(x / m)
    g = j_factor(m) * t / math.sqrt(eff_n)
    return Study(n_t=n_t, n_c=n_c, g=g, v2=g_variance(g, n_t, n_c))
