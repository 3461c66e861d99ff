import math

import numpy as np
import pytest
from scipy.special import erfinv

from smdmeta.numkernel import chisq_cdf, chisq_quantile
from smdmeta.qstat import MetaInput, q_statistic, iv_weighted_mean
from smdmeta.smd import Study, g_variance
from smdmeta.tau2 import (
    ci_bj,
    ci_jackson,
    ci_kdb,
    ci_pl,
    ci_qp,
    corrected_expected_q,
    restricted_loglik,
    tau2_dl,
    tau2_jackson,
    tau2_kdb,
    tau2_mp,
    tau2_reml,
)


def meta(gs, v2s, n=20):
    n_t = n // 2
    return MetaInput(tuple(Study(n_t, n - n_t, g, v) for g, v in zip(gs, v2s)))


def random_meta(rng, k=None):
    k = k or int(rng.integers(2, 9))
    gs = rng.standard_normal(k) * rng.uniform(0.5, 2.0)
    v2s = rng.uniform(0.1, 3.0, k)
    return meta(list(gs), list(v2s))


SPREAD = meta([-2.0, 0.0, 2.0], [1.0, 1.0, 1.0])
FLAT = meta([0.4, 0.4, 0.4], [1.0, 0.5, 2.0])


class TestDL:
    def test_truncates_when_q_matches_df(self):
        r = tau2_dl(meta([-1.0, 0.0, 1.0], [1.0, 1.0, 1.0]))
        assert r.value == 0.0 and r.status == "truncated_at_zero"

    def test_closed_form(self):
        r = tau2_dl(SPREAD)
        assert r.value == pytest.approx(3.0, rel=1e-12)
        assert r.status == "interior"

    def test_homogeneous(self):
        assert tau2_dl(FLAT).value == 0.0


class TestMP:
    def test_hand_case(self):
        assert tau2_mp(SPREAD).value == pytest.approx(3.0, rel=1e-7)

    def test_truncation(self):
        r = tau2_mp(meta([0.0, 0.1], [1.0, 1.0]))
        assert r.value == 0.0 and r.status == "truncated_at_zero"

    def test_equals_dl_under_equal_variances(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(2, 9))
            v = float(rng.uniform(0.2, 2.0))
            data = meta(list(rng.standard_normal(k) * 2), [v] * k)
            dl, mp = tau2_dl(data), tau2_mp(data)
            assert mp.value == pytest.approx(dl.value, rel=1e-6, abs=1e-8)


class TestREML:
    def test_balanced_closed_form(self):
        assert tau2_reml(SPREAD).value == pytest.approx(3.0, rel=1e-7)

    def test_homogeneous(self):
        assert tau2_reml(FLAT).value == 0.0

    def test_score_equation_residual(self):
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 10:
            data = random_meta(rng)
            r = tau2_reml(data)
            if r.status != "interior":
                continue
            fit = iv_weighted_mean(data, r.value)
            w2 = fit.weights ** 2
            fixed_point = float(
                (w2 * ((data.g - fit.mean) ** 2 - data.v2)).sum()
            ) / float(w2.sum()) + 1.0 / fit.sum_w
            assert fixed_point == pytest.approx(r.value, abs=1e-6 * (1 + r.value))
            checked += 1

    def test_objective_is_maximized(self):
        rng = np.random.default_rng(13)
        data = random_meta(rng, k=6)
        r = tau2_reml(data)
        l_hat = restricted_loglik(data, r.value)
        grid = np.linspace(0.0, max(4 * r.value + 1.0, 2.0), 500)
        assert all(restricted_loglik(data, float(t)) <= l_hat + 1e-7
                   for t in grid)


class TestJackson:
    def test_hand_case(self):
        data = meta([0.0, 2.0], [1.0, 4.0])
        r = tau2_jackson(data)
        assert r.value == 0.0 and r.status == "truncated_at_zero"

    def test_homogeneous(self):
        assert tau2_jackson(FLAT).value == 0.0

    def test_equal_variance_collapse_to_dl(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            k = int(rng.integers(2, 9))
            v = float(rng.uniform(0.2, 2.0))
            data = meta(list(rng.standard_normal(k) * 2), [v] * k)
            assert tau2_jackson(data).value == pytest.approx(
                tau2_dl(data).value, rel=1e-10, abs=1e-12)


def kdb_input(k, n, q, d):
    n_t = math.ceil((1 - q) * n)
    n_c = n - n_t
    return MetaInput(tuple(Study(n_t, n_c, d, g_variance(d, n_t, n_c))
                           for _ in range(k)))


class TestCorrectedExpectedQ:
    def test_limits_to_k_minus_1(self):
        data = kdb_input(5, 10**6, 0.5, 0.5)
        assert corrected_expected_q(data) == pytest.approx(4.0, abs=1e-3)

    def test_reorder_invariance(self):
        studies = (Study(10, 10, 0.3, g_variance(0.3, 10, 10)),
                   Study(6, 14, -0.2, g_variance(-0.2, 6, 14)),
                   Study(25, 25, 1.1, g_variance(1.1, 25, 25)))
        a = corrected_expected_q(MetaInput(studies))
        b = corrected_expected_q(MetaInput(studies[::-1]))
        assert a == pytest.approx(b, rel=1e-10)

    def test_positive_across_plugins(self):
        data = kdb_input(5, 12, 0.75, 0.0)
        for d in (-6.0, -1.0, 0.0, 0.4, 2.0, 6.0):
            assert corrected_expected_q(data, effect=d) > 0

    def test_series_and_quadrature_branches_agree(self):
        # n=1800 sits above the branch threshold, n=900 below
        hi = corrected_expected_q(kdb_input(5, 1800, 0.5, 0.5))
        lo = corrected_expected_q(kdb_input(5, 900, 0.5, 0.5))
        # both are (K-1) - c/n + O(1/n^2): c estimated from either point
        c_hi = (4.0 - hi) * 1800
        c_lo = (4.0 - lo) * 900
        assert c_hi == pytest.approx(c_lo, rel=0.05)


class TestKDB:
    def test_matches_mp_for_huge_n(self):
        gs = [0.1, 0.6, -0.2, 0.9, 0.4]
        n = 10**6
        data = MetaInput(tuple(Study(n // 2, n // 2, g,
                                     g_variance(g, n // 2, n // 2))
                               for g in gs))
        kdb, mp = tau2_kdb(data), tau2_mp(data)
        assert kdb.value == pytest.approx(mp.value, rel=1e-3, abs=1e-9)

    def test_truncation(self):
        data = kdb_input(5, 20, 0.5, 0.5)  # all g equal -> Q == 0
        r = tau2_kdb(data)
        assert r.value == 0.0 and r.status == "truncated_at_zero"


class TestCiQP:
    def test_df1_endpoints(self):
        data = meta([0.0, 2.0], [1.0, 1.0])
        ci = ci_qp(data)
        q975 = 2 * erfinv(0.975) ** 2
        q025 = 2 * erfinv(0.025) ** 2
        assert q_statistic(data, 0.0) < q975
        assert ci.lo == 0.0
        assert ci.hi == pytest.approx(2.0 / q025 - 1.0, rel=1e-6)

    def test_degenerate_all_equal(self):
        ci = ci_qp(FLAT)
        assert ci.lo == 0.0 and ci.hi == 0.0

    def test_contains_mp(self):
        rng = np.random.default_rng(23)
        for _ in range(15):
            data = random_meta(rng)
            mp = tau2_mp(data)
            ci = ci_qp(data)
            assert ci.lo - 1e-9 <= mp.value <= ci.hi + 1e-9


class TestCiKDB:
    def test_near_qp_for_huge_n(self):
        n = 10**6
        gs = [0.0, 1e-3, -5e-4, 2e-3]
        data = MetaInput(tuple(Study(n // 2, n // 2, g,
                                     g_variance(g, n // 2, n // 2))
                               for g in gs))
        a, b = ci_kdb(data), ci_qp(data)
        assert a.lo == pytest.approx(b.lo, abs=1e-6)
        assert a.hi == pytest.approx(b.hi, abs=1e-6)

    def test_ordered_and_contains_kdb_point(self):
        rng = np.random.default_rng(29)
        for _ in range(8):
            data = random_meta(rng)
            ci = ci_kdb(data)
            assert ci.lo <= ci.hi
            kdb = tau2_kdb(data)
            assert ci.lo - 1e-9 <= kdb.value <= ci.hi + 1e-9


class TestCiBJ:
    def test_k2_equal_variance_closed_form(self):
        data = meta([0.0, 2.0], [1.0, 1.0])
        q_obs = q_statistic(data, 0.0)
        ci = ci_bj(data)
        # single mixture coefficient (1 + tau2): chisq_1 inversion in closed form
        assert chisq_cdf(q_obs, 1.0) <= 0.975
        assert ci.lo == 0.0
        hi_exact = q_obs / chisq_quantile(0.025, 1.0) - 1.0
        assert ci.hi == pytest.approx(hi_exact, rel=1e-4)

    def test_eigenvalue_sum_is_df(self):
        # equal v^2 at tau2 = 0: coefficients of the Q mixture sum to K - 1
        from smdmeta.numkernel import symmetric_eigenvalues
        k, v = 6, 0.7
        w = np.full(k, 1.0 / v)
        a = np.diag(w) - np.outer(w, w) / w.sum()
        droot = np.sqrt(np.full(k, v))
        lam = symmetric_eigenvalues(a * np.outer(droot, droot))
        assert lam[:k - 1].sum() == pytest.approx(k - 1, rel=1e-12)

    def test_matches_simulated_quadratic_form(self):
        # empirical CDF of Q at the solved endpoints recovers the levels
        rng = np.random.default_rng(31)
        data = meta([0.1, 0.9, -0.4, 1.8, 0.6], [0.3, 0.5, 0.8, 0.4, 1.1])
        ci = ci_bj(data)
        w = 1.0 / data.v2
        gbar = float((w * data.g).sum() / w.sum())
        q_obs = float((w * (data.g - gbar) ** 2).sum())
        for tau2, level in ((ci.lo, 0.975), (ci.hi, 0.025)):
            if tau2 == 0.0:
                continue
            sd = np.sqrt(data.v2 + tau2)
            z = rng.standard_normal((200_000, data.k)) * sd
            zbar = (w * z).sum(axis=1) / w.sum()
            q_sim = (w * (z - zbar[:, None]) ** 2).sum(axis=1)
            assert float((q_sim <= q_obs).mean()) == pytest.approx(level,
                                                                   abs=0.005)

    def test_all_equal_degenerate(self):
        ci = ci_bj(FLAT)
        assert ci.lo == 0.0 and ci.hi == 0.0


class TestCiJackson:
    def test_equal_variance_matches_bj(self):
        rng = np.random.default_rng(37)
        for _ in range(5):
            k = int(rng.integers(2, 7))
            v = float(rng.uniform(0.3, 1.5))
            data = meta(list(rng.standard_normal(k) * 1.5), [v] * k)
            a, b = ci_jackson(data), ci_bj(data)
            # identical up to the endpoint solver tolerance
            assert a.lo == pytest.approx(b.lo, rel=1e-4, abs=1e-5)
            assert a.hi == pytest.approx(b.hi, rel=1e-4, abs=1e-5)

    def test_all_equal_lo_zero(self):
        assert ci_jackson(FLAT).lo == 0.0


class TestCiPL:
    def test_center_maximizes_likelihood_on_grid(self):
        rng = np.random.default_rng(41)
        data = random_meta(rng, k=7)
        r = tau2_reml(data)
        l_hat = restricted_loglik(data, r.value)
        grid = np.linspace(0.0, 4 * (r.value + 1.0), 1000)
        assert max(restricted_loglik(data, float(t)) for t in grid) \
            <= l_hat + 1e-7

    def test_all_equal_lo_zero(self):
        assert ci_pl(FLAT).lo == 0.0

    def test_endpoints_on_likelihood_contour(self):
        rng = np.random.default_rng(43)
        data = meta(list(rng.standard_normal(6) * 1.4),
                    list(rng.uniform(0.2, 1.0, 6)))
        ci = ci_pl(data)
        r = tau2_reml(data)
        l_hat = restricted_loglik(data, r.value)
        crit = chisq_quantile(0.95, 1.0)
        if ci.lo > 0.0:
            assert 2 * (l_hat - restricted_loglik(data, ci.lo)) == \
                pytest.approx(crit, abs=1e-5)
        assert 2 * (l_hat - restricted_loglik(data, ci.hi)) == \
            pytest.approx(crit, abs=1e-5)
        assert ci.lo <= r.value <= ci.hi


class TestHomogeneousInputs:
    def test_all_point_estimators_zero(self):
        for fn in (tau2_dl, tau2_mp, tau2_reml, tau2_jackson, tau2_kdb):
            assert fn(FLAT).value == 0.0

    def test_monotone_response_to_spread(self):
        base = np.array([-1.0, 0.2, 1.1, -0.4])
        v2s = [0.4, 0.8, 0.6, 1.0]
        for fn in (tau2_dl, tau2_mp, tau2_reml, tau2_jackson):
            prev = -1.0
            for c in (1.0, 1.5, 2.5):
                gbar = base.mean()
                gs = list(gbar + c * (base - gbar))
                val = fn(meta(gs, v2s)).value
                assert val >= prev - 1e-9
                prev = val
