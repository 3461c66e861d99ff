"""Point and interval estimators of the between-study variance tau^2.

Point estimators: DerSimonian-Laird (DL), Mandel-Paule (MP), restricted
maximum likelihood (REML), Jackson's fixed-weights moment estimator (J),
and the corrected-moment estimator (KDB) that equates Q to a first moment
corrected to O(1/n) for the SMD weight/estimate coupling, after Kulinskaya,
Dollinger and Bjorkestol (2011).

Interval estimators: Q-profile (QP), the corrected Q-profile (KDB),
Biggerstaff-Jackson (BJ) and Jackson (J) intervals based on the exact
chi-square-mixture distribution of a fixed-weights Q, and the REML-based
profile likelihood interval (PL).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.optimize import brentq

from .numkernel import (
    ChiSqMixture,
    DomainError,
    NonConvergenceError,
    chisq_quantile,
    ln_gamma,
    mixture_cdf,
    symmetric_eigenvalues,
)
from .qstat import (
    BRACKET_CAP,
    BracketCapExceeded,
    MetaInput,
    iv_weighted_mean,
    q_statistic,
    solve_q_equals,
)
from .smd import j_factor

POINT_METHODS = ("DL", "MP", "REML", "J", "KDB")
INTERVAL_METHODS = ("QP", "BJ", "J", "PL", "KDB")

# The exact-quadrature moment branch is used below this df; above it the
# weight-expansion series is indistinguishable (O(1/n^2) apart) and cheaper.
_SERIES_DF_MIN = 1000

# CDF tolerance while inverting the BJ/J mixture distribution over tau2;
# endpoint precision is dominated by the root-finder tolerances anyway.
_MIX_TOL = 1e-5


@dataclass(frozen=True)
class Tau2Result:
    value: float
    method: str
    status: str  # "interior" | "truncated_at_zero" | "max_iter"
    iterations: int = 0

    def __post_init__(self):
        if self.value < 0:
            raise DomainError("tau^2 estimate must be >= 0")
        if self.status == "truncated_at_zero" and self.value != 0.0:
            raise DomainError("truncated_at_zero implies value == 0")


@dataclass(frozen=True)
class Tau2Interval:
    lo: float
    hi: float  # math.inf when the upper endpoint exceeds the bracket cap
    method: str
    level: float = 0.95
    flags: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not 0.0 <= self.lo <= self.hi:
            raise DomainError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")
        if not 0.0 < self.level < 1.0:
            raise DomainError(f"level must be in (0,1), got {self.level}")

    def contains(self, tau2: float) -> bool:
        return self.lo <= tau2 <= self.hi


# ---------------------------------------------------------------------------
# point estimators
# ---------------------------------------------------------------------------

def tau2_dl(data: MetaInput) -> Tau2Result:
    """DerSimonian-Laird moment estimator (closed form, truncated at zero)."""
    w = 1.0 / data.v2
    s1 = float(w.sum())
    s2 = float((w * w).sum())
    denom = s1 - s2 / s1
    if denom <= 0:
        raise DomainError("degenerate DL denominator; needs K >= 2")
    q0 = q_statistic(data, 0.0)
    raw = (q0 - (data.k - 1)) / denom
    if raw <= 0:
        return Tau2Result(0.0, "DL", "truncated_at_zero")
    return Tau2Result(raw, "DL", "interior")


def tau2_mp(data: MetaInput) -> Tau2Result:
    """Mandel-Paule estimator: solves Q(tau2) = K - 1."""
    root = solve_q_equals(data, float(data.k - 1))
    status = "truncated_at_zero" if root.status == "truncated" else "interior"
    return Tau2Result(root.value, "MP", status, root.iterations)


def restricted_loglik(data: MetaInput, tau2: float) -> float:
    """Restricted profile log-likelihood of tau2 (constants dropped)."""
    if tau2 < 0:
        raise DomainError(f"tau2 must be >= 0, got {tau2}")
    sigma2 = data.v2 + tau2
    fit = iv_weighted_mean(data, tau2)
    return -0.5 * (float(np.log(sigma2).sum()) + math.log(fit.sum_w)
                   + q_statistic(data, tau2))


def tau2_reml(data: MetaInput, tol: float = 1e-8,
              max_iter: int = 200) -> Tau2Result:
    """REML via the damped fixed-point iteration

        tau2 <- max(0, sum w^2 ((g - mean)^2 - v^2) / sum w^2 + 1 / sum w),

    started at the DL estimate; steps that decrease the restricted
    log-likelihood are halved toward the current iterate.
    """
    t = tau2_dl(data).value
    l_cur = restricted_loglik(data, t)
    for it in range(1, max_iter + 1):
        fit = iv_weighted_mean(data, t)
        w2 = fit.weights ** 2
        resid2 = (data.g - fit.mean) ** 2
        prop = float((w2 * (resid2 - data.v2)).sum()) / float(w2.sum()) \
            + 1.0 / fit.sum_w
        prop = max(0.0, prop)
        l_prop = restricted_loglik(data, prop)
        halvings = 0
        while l_prop < l_cur - 1e-13 and halvings < 30:
            prop = 0.5 * (prop + t)
            l_prop = restricted_loglik(data, prop)
            halvings += 1
        done = abs(prop - t) <= tol * (1.0 + prop)
        t, l_cur = prop, l_prop
        if done:
            status = "truncated_at_zero" if t == 0.0 else "interior"
            return Tau2Result(t, "REML", status, it)
    return Tau2Result(t, "REML", "max_iter", max_iter)


def tau2_jackson(data: MetaInput) -> Tau2Result:
    """Jackson's moment estimator with fixed weights u_i = 1/v_i.

    With U = sum u and c_i = u_i - u_i^2/U, E[Q_gen] = sum c_i (v_i^2 + tau2),
    so tau2 is estimated by (Q_gen - sum c_i v_i^2) / sum c_i, truncated at 0.
    """
    u = 1.0 / np.sqrt(data.v2)
    big_u = float(u.sum())
    gbar = float((u * data.g).sum()) / big_u
    q_gen = float((u * (data.g - gbar) ** 2).sum())
    c = u - u * u / big_u
    raw = (q_gen - float((c * data.v2).sum())) / float(c.sum())
    if raw <= 0:
        return Tau2Result(0.0, "J", "truncated_at_zero")
    return Tau2Result(raw, "J", "interior")


# ---------------------------------------------------------------------------
# corrected expected value of Q (the KDB moment target)
# ---------------------------------------------------------------------------
#
# Under homogeneity at a common effect d, each study contributes
#   g = sqrt(kappa) (Z + c) / sqrt(X),  kappa = J^2 m / ntilde,
#   c = sqrt(ntilde) d,  Z ~ N(0,1),  X ~ chi2_m,
# and the estimated-variance weight is psi(g) = 1/(a + b g^2) with
# a = 1/ntilde, b = 1 - (m-2)/(m J^2).  Because psi depends on g, K - 1
# misses the first moment of Q = sum psi_i (g_i - gbar)^2 by O(1/n).
#
# The moments E[psi^p x^r] (x = g - d) needed for E[Q] reduce, through
#   1/(aX + b kappa (Z+c)^2)^p = (1/Gamma(p)) int t^{p-1} e^{-t(...)} dt,
# to one-dimensional integrals whose X- and Z-factors are closed-form.
# E[Q] itself then follows from a second-order expansion of the ratio
# (sum psi x)^2 / sum psi around its mean, which is the only O(1/n^2)
# truncation left.


def _gauss_raw_moment(j: int, mu: float, s2: float) -> float:
    if j == 0:
        return 1.0
    if j == 1:
        return mu
    if j == 2:
        return mu * mu + s2
    raise DomainError(f"unsupported raw-moment order {j}")


def _e_gj_psip_quad(j: int, p: int, m: int, eff_n: float, jf: float,
                    b: float, d: float) -> float:
    """E[g^j psi^p] by quadrature of the Laplace-transform representation."""
    kappa = jf * jf * m / eff_n
    c = math.sqrt(eff_n) * d
    a = 1.0 / eff_n
    rho = p - 0.5 * j
    log_pref = (0.5 * j * math.log(kappa) + rho * math.log(2.0)
                + ln_gamma(m / 2.0 + rho) - ln_gamma(m / 2.0) - ln_gamma(p))
    pref = math.exp(log_pref)
    bk = b * kappa
    mhalf_rho = m / 2.0 + rho

    def integrand(t: float) -> float:
        opb = 1.0 + 2.0 * bk * t
        gj = (opb ** -0.5 * math.exp(-c * c * bk * t / opb)
              * _gauss_raw_moment(j, c / opb, 1.0 / opb))
        return t ** (p - 1) * (1.0 + 2.0 * a * t) ** -mhalf_rho * gj

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IntegrationWarning)
        val, abserr = quad(integrand, 0.0, np.inf,
                           epsabs=1e-13, epsrel=1e-11, limit=400)
    if not math.isfinite(val) or abserr > 1e-7 * max(1.0, abs(val)):
        raise NonConvergenceError(
            f"moment quadrature for (j={j}, p={p}, m={m}, d={d}) achieved "
            f"only {abserr:g}", error_bound=abserr)
    return pref * val


_MOMENT_KEYS = ((1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2),
                (3, 1), (3, 2), (4, 2))


def _psi_x_moments_quad(m, eff_n, jf, b, d):
    raw = {}
    out = {}
    for p, r in _MOMENT_KEYS:
        s = 0.0
        for j in range(r + 1):
            if (j, p) not in raw:
                raw[(j, p)] = _e_gj_psip_quad(j, p, m, eff_n, jf, b, d)
            s += math.comb(r, j) * (-d) ** (r - j) * raw[(j, p)]
        out[(p, r)] = s
    return out


def _psi_x_moments_series(m, eff_n, jf, b, d):
    """Large-m branch: expand psi^p around x = 0 with exact central moments."""
    j2 = jf * jf
    lam2 = j2 * m / (m - 2)
    lam3 = j2 * m / (m - 3)
    lam4 = j2 * j2 * m * m / ((m - 2) * (m - 4))
    eg2 = lam2 * (1.0 / eff_n + d * d)
    eg3 = lam3 * (d ** 3 + 3.0 * d / eff_n)
    eg4 = lam4 * (d ** 4 + 6.0 * d * d / eff_n + 3.0 / eff_n ** 2)
    mu = [1.0, 0.0,
          eg2 - d * d,
          eg3 - 3 * d * eg2 + 2 * d ** 3,
          eg4 - 4 * d * eg3 + 6 * d * d * eg2 - 3 * d ** 4]

    a = 1.0 / eff_n
    w = 1.0 / (a + b * d * d)
    be = b * w
    c1 = -2.0 * d * be
    c2 = 4.0 * d * d * be * be - be
    c3 = 4.0 * d * be * be - 8.0 * d ** 3 * be ** 3
    c4 = be * be - 12.0 * d * d * be ** 3 + 16.0 * d ** 4 * be ** 4
    # coefficients of x^s in (psi/w)^p for s = 0..4
    coef = {
        1: (1.0, c1, c2, c3, c4),
        2: (1.0, 2 * c1, 2 * c2 + c1 ** 2, 2 * c3 + 2 * c1 * c2,
            2 * c4 + 2 * c1 * c3 + c2 ** 2),
        3: (1.0, 3 * c1, 3 * c2 + 3 * c1 ** 2,
            3 * c3 + 6 * c1 * c2 + c1 ** 3,
            3 * c4 + 6 * c1 * c3 + 3 * c2 ** 2 + 3 * c1 ** 2 * c2),
        4: (1.0, 4 * c1, 4 * c2 + 6 * c1 ** 2,
            4 * c3 + 12 * c1 * c2 + 4 * c1 ** 3,
            4 * c4 + 12 * c1 * c3 + 6 * c2 ** 2 + 12 * c1 ** 2 * c2
            + c1 ** 4),
    }
    out = {}
    for p, r in _MOMENT_KEYS:
        cs = coef[p]
        # truncate at total moment order 4; remainder is O(1/n^2) relative
        out[(p, r)] = w ** p * sum(cs[s] * mu[s + r] for s in range(5 - r))
    return out


def _study_psi_moments(n_t: int, n_c: int, d: float) -> dict:
    m = n_t + n_c - 2
    eff_n = n_t * n_c / (n_t + n_c)
    jf = j_factor(m)
    b = 1.0 - (m - 2) / (m * jf * jf)
    if m >= _SERIES_DF_MIN:
        return _psi_x_moments_series(m, eff_n, jf, b, d)
    return _psi_x_moments_quad(m, eff_n, jf, b, d)


def corrected_expected_q(data: MetaInput, effect: float | None = None) -> float:
    """First moment of Q(0) corrected for the coupling between g and its
    estimated-variance weight, evaluated at a plug-in common effect.

    The plug-in defaults to the sample-size-weighted mean, which does not
    depend on the estimated variances.  Tends to K - 1 as all n_i grow.
    """
    if effect is None:
        effect = float((data.eff_n * data.g).sum() / data.eff_n.sum())
    k = data.k
    ep = np.empty(k)
    er = np.empty(k)
    es = np.empty(k)
    var_r = np.empty(k)
    cov_rp = np.empty(k)
    cov_r2p = np.empty(k)
    e_rp2 = np.empty(k)
    var_p = np.empty(k)
    t4 = np.empty(k)
    memo: dict = {}
    for i, (n_t, n_c) in enumerate(data.arm_sizes):
        if (n_t, n_c) not in memo:
            memo[(n_t, n_c)] = _study_psi_moments(n_t, n_c, effect)
        mom = memo[(n_t, n_c)]
        ep[i] = mom[(1, 0)]
        er[i] = mom[(1, 1)]
        es[i] = mom[(1, 2)]
        var_r[i] = mom[(2, 2)] - er[i] ** 2
        cov_rp[i] = mom[(2, 1)] - er[i] * ep[i]
        cov_r2p[i] = mom[(3, 2)] - mom[(2, 2)] * ep[i]
        e_rp2[i] = mom[(3, 1)] - 2.0 * ep[i] * mom[(2, 1)] + ep[i] ** 2 * er[i]
        var_p[i] = mom[(2, 0)] - ep[i] ** 2
        t4[i] = mom[(4, 2)] - 2.0 * ep[i] * mom[(3, 2)] + ep[i] ** 2 * mom[(2, 2)]
    w_tot = float(ep.sum())
    a1 = float(er.sum())
    v_r = float(var_r.sum())
    e_n = v_r + a1 * a1
    e_nd = float((cov_r2p + 2.0 * cov_rp * (a1 - er)).sum())
    c_sum = float(cov_rp.sum())
    c_sq = float((cov_rp ** 2).sum())
    e_nd2 = float((t4 + 2.0 * e_rp2 * (a1 - er)
                   + var_p * (v_r - var_r + (a1 - er) ** 2)).sum()) \
        + 2.0 * (c_sum * c_sum - c_sq)
    expected = float(es.sum()) - (e_n / w_tot - e_nd / w_tot ** 2
                                  + e_nd2 / w_tot ** 3)
    if not (math.isfinite(expected) and expected > 0):
        raise NonConvergenceError(
            f"corrected E[Q] came out non-positive ({expected}) at "
            f"effect={effect}")
    return expected


def tau2_kdb(data: MetaInput, expected_q: float | None = None) -> Tau2Result:
    """Corrected-moment estimator: solves Q(tau2) = corrected E[Q]."""
    target = corrected_expected_q(data) if expected_q is None else expected_q
    root = solve_q_equals(data, target)
    status = "truncated_at_zero" if root.status == "truncated" else "interior"
    return Tau2Result(root.value, "KDB", status, root.iterations)


# ---------------------------------------------------------------------------
# interval estimators
# ---------------------------------------------------------------------------

def _q_profile(data: MetaInput, level: float, df: float,
               method: str) -> Tau2Interval:
    alpha = 1.0 - level
    flags: list[str] = []
    lo = solve_q_equals(data, chisq_quantile(1.0 - alpha / 2.0, df)).value
    try:
        hi = solve_q_equals(data, chisq_quantile(alpha / 2.0, df)).value
    except BracketCapExceeded:
        hi = math.inf
        flags.append("upper-beyond-cap")
    return Tau2Interval(lo, hi, method, level, tuple(flags))


def ci_qp(data: MetaInput, level: float = 0.95) -> Tau2Interval:
    """Q-profile interval: inverts Q(tau2) at chi-squared(K-1) quantiles."""
    return _q_profile(data, level, float(data.k - 1), "QP")


def ci_kdb(data: MetaInput, level: float = 0.95,
           expected_q: float | None = None) -> Tau2Interval:
    """Q-profile interval at fractional-df quantiles, df = corrected E[Q]."""
    df = corrected_expected_q(data) if expected_q is None else expected_q
    return _q_profile(data, level, df, "KDB")


def _fixed_weight_interval(data: MetaInput, level: float, weights: np.ndarray,
                           method: str) -> Tau2Interval:
    """Invert the exact CDF of a fixed-weights Q over candidate tau2.

    Under the model, Q_obs = sum w (g - gbar_w)^2 is a quadratic form in the
    g's whose distribution at a given tau2 is a chi-square mixture with
    coefficients equal to the nonzero eigenvalues of
    D(tau2)^{1/2} A D(tau2)^{1/2}, A = diag(w) - w w'/sum w.
    """
    alpha = 1.0 - level
    flags: list[str] = []
    sum_w = float(weights.sum())
    gbar = float((weights * data.g).sum()) / sum_w
    q_obs = float((weights * (data.g - gbar) ** 2).sum())
    if q_obs <= 0.0:
        return Tau2Interval(0.0, 0.0, method, level, ("degenerate",))
    a_mat = np.diag(weights) - np.outer(weights, weights) / sum_w
    k = data.k

    def cdf_at(tau2: float) -> float:
        droot = np.sqrt(data.v2 + tau2)
        m = a_mat * np.outer(droot, droot)
        lam = symmetric_eigenvalues(m)[:k - 1]
        lam = lam[lam > 0.0]
        return mixture_cdf(q_obs, ChiSqMixture(tuple(lam)), tol=_MIX_TOL)

    f_at_zero = cdf_at(0.0)

    def solve(target: float, hint: float) -> float:
        if f_at_zero <= target:
            return 0.0
        br_lo, f_lo = 0.0, f_at_zero
        br_hi = hint
        while True:
            f_hi = cdf_at(br_hi)
            if f_hi > f_lo + 32.0 * _MIX_TOL and "nonmonotone-cdf" not in flags:
                flags.append("nonmonotone-cdf")
            if f_hi < target:
                break
            br_lo, f_lo = br_hi, f_hi
            br_hi *= 2.0
            if br_hi > BRACKET_CAP:
                return math.inf
        return float(brentq(lambda t: cdf_at(t) - target, br_lo, br_hi,
                            xtol=1e-6, rtol=1e-5))

    # the upper root also brackets the lower root, saving one search
    hi = solve(alpha / 2.0, 1.0)
    lo = solve(1.0 - alpha / 2.0, hi if 0.0 < hi < math.inf else 1.0)
    if math.isinf(hi):
        flags.append("upper-beyond-cap")
    return Tau2Interval(lo, hi, method, level, tuple(flags))


def ci_bj(data: MetaInput, level: float = 0.95) -> Tau2Interval:
    """Biggerstaff-Jackson interval: exact CDF inversion of Q with
    inverse-variance weights w_i = 1/v_i^2."""
    return _fixed_weight_interval(data, level, 1.0 / data.v2, "BJ")


def ci_jackson(data: MetaInput, level: float = 0.95) -> Tau2Interval:
    """Jackson's interval: as BJ but with weights u_i = 1/v_i."""
    return _fixed_weight_interval(data, level, 1.0 / np.sqrt(data.v2), "J")


def ci_pl(data: MetaInput, level: float = 0.95,
          reml: Tau2Result | None = None) -> Tau2Interval:
    """Profile-likelihood interval around the REML estimate:

        { tau2 >= 0 : 2 (l(tau2_REML) - l(tau2)) <= chi2_{1; level} }.
    """
    if reml is None:
        reml = tau2_reml(data)
    crit = chisq_quantile(level, 1.0)
    center = reml.value
    l_hat = restricted_loglik(data, center)
    l_zero = restricted_loglik(data, 0.0)
    if l_zero > l_hat:
        # fixed point stopped short of the boundary maximum
        center, l_hat = 0.0, l_zero
    flags: list[str] = []

    def h(tau2: float) -> float:
        return 2.0 * (l_hat - restricted_loglik(data, tau2)) - crit

    if h(0.0) <= 0.0:
        lo = 0.0
    else:
        lo = float(brentq(h, 0.0, center, xtol=1e-10, rtol=1e-8))

    br_lo = center
    br = max(1.0, 2.0 * center)
    while h(br) <= 0.0:
        br_lo = br
        br *= 2.0
        if br > BRACKET_CAP:
            br = math.inf
            break
    if math.isinf(br):
        hi = math.inf
        flags.append("upper-beyond-cap")
    else:
        hi = float(brentq(h, br_lo, br, xtol=1e-10, rtol=1e-8))

    if abs(l_hat - l_zero) < 1e-12 and (math.isinf(br)
                                        or abs(l_hat - restricted_loglik(data, br)) < 1e-12):
        flags.append("flat-likelihood")
    return Tau2Interval(lo, hi, "PL", level, tuple(flags))
