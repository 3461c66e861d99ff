"""Distribution primitives, chi-square mixture CDFs, and reproducible random streams.

Everything here is a pure function of its inputs.  Quantiles and CDFs are
backed by scipy.special; the mixture CDF and the counter-based random
streams are implemented locally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from hashlib import blake2b
from typing import Union

import numpy as np
from numpy.random import Generator, Philox
from scipy.integrate import quad
from scipy.special import gammainc, gammaincinv, ndtri, stdtrit


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class NonConvergenceError(RuntimeError):
    """An iterative routine failed to certify its tolerance.

    ``error_bound`` carries the achieved bound when one is available.
    """

    def __init__(self, message: str, error_bound: float | None = None):
        super().__init__(message)
        self.error_bound = error_bound


_U64 = 2**64


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def ln_gamma(x: float) -> float:
    """Natural log of the gamma function for x > 0."""
    if not x > 0:
        raise DomainError(f"ln_gamma requires x > 0, got {x}")
    return math.lgamma(x)


def chisq_cdf(x: float, df: float) -> float:
    """Chi-squared CDF, fractional degrees of freedom allowed.

    Computed as the regularized lower incomplete gamma P(df/2, x/2).
    """
    if df <= 0:
        raise DomainError(f"chisq_cdf requires df > 0, got {df}")
    if x < 0:
        raise DomainError(f"chisq_cdf requires x >= 0, got {x}")
    return float(gammainc(df / 2.0, x / 2.0))


def chisq_quantile(p: float, df: float) -> float:
    """Inverse of chisq_cdf in its first argument."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"chisq_quantile requires 0 < p < 1, got {p}")
    if df <= 0:
        raise DomainError(f"chisq_quantile requires df > 0, got {df}")
    return float(2.0 * gammaincinv(df / 2.0, p))


def t_quantile(p: float, df: float) -> float:
    """Student-t quantile, fractional degrees of freedom allowed."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"t_quantile requires 0 < p < 1, got {p}")
    if df <= 0:
        raise DomainError(f"t_quantile requires df > 0, got {df}")
    return float(stdtrit(df, p))


def normal_quantile(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"normal_quantile requires 0 < p < 1, got {p}")
    return float(ndtri(p))


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomStream:
    """Address of an independent random stream.

    Streams are values: two RandomStream instances with equal
    ``(seed, stream_id)`` always yield identical draw sequences, and
    distinct ``stream_id`` values select distinct 128-bit Philox keys,
    so replication order and worker scheduling can never change results.
    """

    seed: int
    stream_id: int

    def __post_init__(self):
        if not 0 <= self.seed < _U64:
            raise DomainError("seed must fit in 64 bits")
        if not 0 <= self.stream_id < _U64:
            raise DomainError("stream_id must fit in 64 bits")

    def generator(self) -> Generator:
        """Fresh generator positioned at the start of this stream."""
        return Generator(Philox(key=[self.seed, self.stream_id]))


def derive_stream_id(*parts: int | float | str) -> int:
    """Map a tuple of labels (cell coordinates, replicate index, ...) to a
    64-bit stream id via a keyed hash; stable across processes and runs."""
    h = blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"|")
    return int.from_bytes(h.digest(), "little")


StreamLike = Union[RandomStream, Generator]


def _as_generator(stream: StreamLike) -> Generator:
    if isinstance(stream, RandomStream):
        return stream.generator()
    return stream


def sample_noncentral_t(stream: StreamLike, df: int, ncp: float) -> float:
    """One draw of (Z + ncp) / sqrt(X / df), Z standard normal, X chi-squared(df).

    Accepts either a RandomStream (one deterministic draw per stream) or an
    already-positioned Generator (consumes two variates from it).
    """
    if df < 1:
        raise DomainError(f"sample_noncentral_t requires df >= 1, got {df}")
    gen = _as_generator(stream)
    z = gen.standard_normal()
    x = gen.chisquare(df)
    return (z + ncp) / math.sqrt(x / df)


# ---------------------------------------------------------------------------
# chi-square mixtures:  P(sum_i lambda_i chi2_1 <= x)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChiSqMixture:
    """Positive linear combination of independent chi-squared(1) variables."""

    coefficients: tuple[float, ...]

    def __post_init__(self):
        if len(self.coefficients) == 0:
            raise DomainError("mixture needs at least one coefficient")
        if any(c < 0 for c in self.coefficients):
            raise DomainError("mixture coefficients must be >= 0")
        if not any(c > 0 for c in self.coefficients):
            raise DomainError("mixture needs at least one positive coefficient")


def _ruben_cdf(x: float, lam: np.ndarray, tol: float, max_terms: int):
    """Ruben's central chi-square series with a certified truncation bound.

    Returns (p, bound) or None when max_terms is not enough.  With the scale
    set to min(lam) all series coefficients are nonnegative and sum to one,
    so 1 - sum(a_k) bounds the tail exactly.
    """
    beta = lam.min()
    nu = lam.size
    y = x / beta
    t = 1.0 - beta / lam
    a = np.empty(max_terms + 1)
    g = np.empty(max_terms + 1)
    a[0] = math.exp(0.5 * float(np.log(beta / lam).sum()))
    asum = a[0]
    tpow = np.ones_like(lam)
    nterms = None
    for k in range(1, max_terms + 1):
        tpow *= t
        g[k] = tpow.sum()
        a[k] = float(np.dot(g[1:k + 1], a[k - 1::-1])) / (2.0 * k)
        asum += a[k]
        if 1.0 - asum <= 0.5 * tol:
            nterms = k
            break
        if k % 32 == 0:
            # tail terms are all <= F_{nu+2k+2}(y), cheap sharper bound
            if (1.0 - asum) * chisq_cdf(y, nu + 2 * k + 2) <= 0.5 * tol:
                nterms = k
                break
    if nterms is None:
        return None
    ks = np.arange(nterms + 1)
    terms = gammainc(nu / 2.0 + ks, y / 2.0)
    p = float(np.dot(a[:nterms + 1], terms))
    bound = (1.0 - asum) * chisq_cdf(y, nu + 2 * nterms + 2)
    return min(1.0, p + 0.5 * bound), 0.5 * bound


def _imhof_cdf(x: float, lam: np.ndarray, tol: float):
    """Imhof's characteristic-function inversion with certified truncation.

    Fallback used when the series stalls (extreme coefficient spread).
    Returns (p, bound) or None when the quadrature cannot certify tol.
    """
    k = lam.size
    log_prod = 0.5 * float(np.log(lam).sum())
    # |tail beyond U| <= (1/pi) (2/k) U^{-k/2} / prod(lam)^{1/2}
    log_u = (2.0 / k) * (math.log(2.0 / (k * math.pi * 0.5 * tol)) - log_prod)
    upper = math.exp(log_u)

    def integrand(u: float) -> float:
        if u == 0.0:
            return 0.5 * (float(lam.sum()) - x)
        theta = 0.5 * (float(np.arctan(lam * u).sum()) - x * u)
        log_rho = 0.25 * float(np.log1p((lam * u) ** 2).sum())
        return math.sin(theta) / (u * math.exp(log_rho))

    val, abserr = quad(integrand, 0.0, upper, epsabs=0.25 * tol * math.pi,
                       limit=3000)
    bound = abserr / math.pi + 0.5 * tol
    if bound > tol:
        return None
    p = 0.5 - val / math.pi
    return min(1.0, max(0.0, p)), bound


def mixture_cdf(x: float, mix: ChiSqMixture, tol: float = 1e-6) -> float:
    """CDF of a positive linear combination of chi-squared(1) variables.

    Absolute error is certified to be <= tol.  Raises NonConvergenceError,
    carrying the achieved bound, if neither the series nor the quadrature
    route can certify it.
    """
    lam = np.asarray([c for c in mix.coefficients if c > 0.0], dtype=float)
    if x <= 0.0:
        return 0.0
    if lam.size == 1:
        return chisq_cdf(x / lam[0], 1.0)
    if np.ptp(lam) <= 1e-12 * lam[0]:
        return chisq_cdf(x / lam.mean(), float(lam.size))
    res = _ruben_cdf(x, lam, tol, max_terms=8000)
    if res is not None:
        return res[0]
    res = _imhof_cdf(x, lam, tol)
    if res is not None:
        return res[0]
    raise NonConvergenceError(
        f"mixture_cdf could not certify tol={tol} for {lam.size} coefficients "
        f"with spread {lam.max() / lam.min():.3g}",
        error_bound=tol * 4,
    )


def symmetric_eigenvalues(a: np.ndarray) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, descending."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > 1e-12 * scale:
        raise DomainError("matrix is not symmetric to 1e-12 relative tolerance")
    return np.linalg.eigvalsh(a)[::-1]
