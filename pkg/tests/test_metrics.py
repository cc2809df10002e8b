import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hpcalign.core import Rng
from hpcalign.metrics import (EprCurve, ErrorSeries, UndefinedMetricError, auc_epr, auc_pac, censoring_guard,
                              control_eligible, epr_curve, epr_slope, first_error_time, match_controls, match_key,
                              ols_slope, pac_ratio, pac_slope, pac_slope_from_q, post_error_risk)


def markov(n, T, p_stay, p_enter, seed):
    g = Rng(seed).generator()
    u = g.random((n, T))
    e = np.zeros((n, T), dtype=int)
    e[:, 0] = u[:, 0] < p_enter
    for t in range(1, T):
        e[:, t] = np.where(e[:, t - 1] == 1, u[:, t] < p_stay, u[:, t] < p_enter)
    return [ErrorSeries(f"m{i}", tuple(r), "markov") for i, r in enumerate(e)]


def geometric(n, T, r, seed, q1=0.5):
    """First error in the first 10 steps, then re-error with probability q1 * r**(d-1)."""
    g = Rng(seed).generator()
    out = []
    for i, t0 in enumerate(g.integers(0, 10, size=n)):
        e = np.zeros(T, dtype=int)
        e[t0] = 1
        d = np.arange(1, T - t0)
        e[t0 + 1 :] = g.random(len(d)) < q1 * r ** (d - 1)
        out.append(ErrorSeries(f"g{i}", tuple(e), "geo"))
    return out


def curve_from(values):
    v = np.asarray(values, dtype=float)
    K = len(v)
    return EprCurve(np.arange(1, K + 1), v, v, v * 0, np.ones(K, int), np.ones(K, int), v, v,
                    np.isfinite(v), K, 1, 0)


# --- first errors and matching -------------------------------------------------


def test_first_error_time_examples():
    assert first_error_time([0, 0, 1, 0, 1]) == 2
    assert first_error_time([0, 0, 0]) is None
    assert first_error_time(ErrorSeries("e", (1, 0, 0))) == 0


def test_series_validation():
    with pytest.raises(ValueError):
        ErrorSeries("e", ())
    with pytest.raises(ValueError):
        ErrorSeries("e", (0, 2))


def test_match_key_uses_step_decile():
    s = ErrorSeries("e", (0,) * 20, "t", tuple([0] * 10 + [1] * 10))
    assert match_key(s, 0) == match_key(s, 1)
    assert match_key(s, 0).step_bin == 0 and match_key(s, 19).step_bin == 9
    assert match_key(s, 12).subgoal_id == 1


def test_control_eligibility():
    clean = ErrorSeries("c", (0,) * 10)
    assert control_eligible(clean, 2, 5)
    assert not control_eligible(clean, 6, 5)  # cannot observe t + k_max
    assert not control_eligible(ErrorSeries("p", (0, 1, 0, 0, 0, 0, 0, 0)), 3, 2)  # prior error


def test_one_case_one_control():
    case = ErrorSeries("a", (0, 1, 0, 0))
    ctrl = ErrorSeries("b", (0, 0, 0, 0))
    k = match_key(case, 1)
    m = match_controls([(case, 1, k)], [(ctrl, 1, k)], 2, Rng(0))
    assert m.pairs == [(0, 0)] and m.unmatched == []


def test_empty_pool_leaves_every_case_unmatched():
    case = ErrorSeries("a", (0, 1, 0, 0))
    m = match_controls([(case, 1, match_key(case, 1))], [], 2, Rng(0))
    assert m.pairs == [] and m.unmatched == [0]


def test_pair_count_equals_per_key_minimum():
    g = np.random.default_rng(4)
    s = ErrorSeries("x", (0,) * 30)
    keys = [("t", k, 0) for k in range(6)]
    from hpcalign.metrics import MatchKey

    case_keys = g.integers(0, 6, size=100)
    pool_keys = g.integers(0, 6, size=70)
    cases = [(s, 0, MatchKey(*keys[k])) for k in case_keys]
    pool = [(s, 0, MatchKey(*keys[k])) for k in pool_keys]
    m = match_controls(cases, pool, 3, Rng(1))
    expect = sum(min(int((case_keys == k).sum()), int((pool_keys == k).sum())) for k in range(6))
    assert len(m.pairs) == expect
    assert len(m.pairs) + len(m.unmatched) == 100
    assert len({j for _, j in m.pairs}) == len(m.pairs)  # without replacement
    assert all(cases[i][2] == pool[j][2] for i, j in m.pairs)


# --- EPR ---------------------------------------------------------------------------


def test_extreme_case_gives_epr_one():
    # cases re-err exactly 3 steps after their first error; controls never err
    cases = [ErrorSeries(f"c{i}", (0, 1, 0, 0, 1, 0, 0, 0, 0, 0)) for i in range(20)]
    ctrls = [ErrorSeries(f"u{i}", (0,) * 10) for i in range(20)]
    c = epr_curve(cases + ctrls, 3, n_boot=50, enforce_guard=False)
    assert c.value(3) == 1.0
    assert c.value(1) == 0.0


def test_lags_without_pairs_are_undefined_not_zero():
    eps = [ErrorSeries("c", (0, 0, 0, 1)), ErrorSeries("u", (0, 0, 0, 0))]
    c = epr_curve(eps, 2, n_boot=0)
    assert not c.defined.any() and np.isnan(c.epr).all()
    with pytest.raises(UndefinedMetricError):
        c.value(1)
    with pytest.raises(UndefinedMetricError):
        auc_epr(c, 2)


def test_censoring_guard_is_lower_quartile_of_remaining_horizon():
    eps = [ErrorSeries(f"e{i}", tuple([0] * i + [1] + [0] * 9)) for i in range(4)]
    assert censoring_guard(eps) == 9
    eps = [ErrorSeries(f"e{r}", tuple([1] + [0] * r)) for r in (2, 4, 6, 8, 10)]
    assert censoring_guard(eps) == int(np.floor(np.percentile([2, 4, 6, 8, 10], 25)))


def test_markov_chain_matches_matrix_power_oracle():
    eps = markov(5000, 50, 0.7, 0.1, 1)
    c = epr_curve(eps, 10, n_boot=200, rng=Rng(2))
    P = np.array([[0.9, 0.1], [0.3, 0.7]])
    truth = [np.linalg.matrix_power(P, k)[1, 1] - np.linalg.matrix_power(P, k)[0, 1] for k in range(1, 11)]
    assert np.allclose(truth, 0.6 ** np.arange(1, 11))
    assert np.max(np.abs(c.epr - truth)) <= 0.025
    assert auc_epr(c, 3) == pytest.approx(float(np.sum(c.epr[:3])))
    assert np.all(c.ci_low <= c.epr) and np.all(c.epr <= c.ci_high)


def test_estimator_error_shrinks_with_more_episodes():
    truth = 0.6 ** np.arange(1, 11)
    err = [np.mean([np.mean(np.abs(epr_curve(markov(n, 50, 0.7, 0.1, 300 + s), 10, n_boot=0).epr - truth))
                    for s in range(4)]) for n in (500, 2000, 5000)]
    assert err[0] > err[1] > err[2]


def test_pooled_matchings_keep_cases_and_shrink_control_noise():
    eps = markov(400, 30, 0.7, 0.1, 4)
    one = epr_curve(eps, 5, n_boot=0, rng=Rng(5))
    assert np.array_equal(epr_curve(eps, 5, n_boot=0, rng=Rng(5), n_match=1).epr, one.epr)
    pooled = [epr_curve(eps, 5, n_boot=0, rng=Rng(s), n_match=10) for s in range(8)]
    singles = [epr_curve(eps, 5, n_boot=0, rng=Rng(s)) for s in range(8)]
    assert abs(pooled[0].n_case - one.n_case).max() <= 1  # counts are per matching
    spread = lambda cs: np.std([c.p_ctrl for c in cs], axis=0).mean()  # noqa: E731
    assert spread(pooled) < spread(singles) / 2
    with pytest.raises(ValueError):
        epr_curve(eps, 5, n_match=0)


def test_bootstrap_is_replicate_addressed():
    eps = markov(300, 30, 0.7, 0.1, 9)
    a = epr_curve(eps, 5, n_boot=100, rng=Rng(3))
    b = epr_curve(eps, 5, n_boot=100, rng=Rng(3))
    assert a.ci_low.tobytes() == b.ci_low.tobytes() and a.ci_high.tobytes() == b.ci_high.tobytes()


@given(st.integers(0, 1000), st.floats(0.0, 0.9), st.floats(0.05, 0.5))
def test_epr_range_and_ci_order(seed, stay, enter):
    c = epr_curve(markov(60, 20, stay, enter, seed), 5, n_boot=30, rng=Rng(seed), enforce_guard=False)
    d = c.defined
    assert np.all(np.abs(c.epr[d]) <= 1.0)
    assert np.all(c.ci_low[d] <= c.epr[d] + 1e-15) and np.all(c.epr[d] <= c.ci_high[d] + 1e-15)
    assert np.all(c.n_case >= 0)


def test_ipcw_mode_runs_and_stays_in_range():
    eps = markov(400, 30, 0.7, 0.1, 5)
    c = epr_curve(eps, 5, n_boot=20, ipcw=True)
    assert np.all(np.abs(c.epr[c.defined]) <= 1.0)


# --- AUC and slopes -----------------------------------------------------------------


def test_auc_epr_arithmetic():
    assert auc_epr(curve_from([0.0, 0.0, 0.0]), 3) == 0.0
    assert auc_epr(curve_from([0.1, 0.2, 0.3]), 3) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        auc_epr(curve_from([0.1, 0.2]), 3)


def test_epr_slope_examples():
    assert epr_slope(curve_from([0.3] * 5)) == pytest.approx(0.0)
    assert epr_slope(curve_from(0.05 * np.arange(1, 6))) == pytest.approx(0.05)
    with pytest.raises(UndefinedMetricError):
        epr_slope(curve_from([0.3, np.nan]))


def test_ols_matches_normal_equations():
    x = np.arange(1.0, 11.0)
    y = 0.3 - 0.02 * x + Rng(0).normal(10, 0.01)
    X = np.column_stack([np.ones_like(x), x])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    assert ols_slope(x, y) == pytest.approx(beta[1], rel=1e-12)


# --- PAC -----------------------------------------------------------------------------


def test_pac_closed_forms():
    q = 0.5 * 0.8 ** np.arange(10)
    assert pac_slope_from_q(q, np.arange(1, 11), eps_reg=0.0) == pytest.approx(-math.log(0.8), abs=1e-12)
    assert pac_slope_from_q(np.full(10, 0.3), np.arange(1, 11)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        pac_slope_from_q(np.zeros(5), np.arange(1, 6))
    # both PAC forms agree on exact geometric risk
    pac2 = (q[1] + 0.0) / (q[0] + 0.0)
    assert pac_slope_from_q(q, np.arange(1, 11), eps_reg=0.0) == pytest.approx(-math.log(pac2), abs=1e-6)


def test_geometric_fixture():
    eps = geometric(20_000, 40, 0.8, 7)
    assert pac_slope(eps, (1, 10)) == pytest.approx(-math.log(0.8), abs=0.02)
    res = pac_ratio(eps, 10, n_boot=100, rng=Rng(1))
    assert res.ratio[0] == 1.0
    assert res.ratio[2] == pytest.approx(0.64, abs=0.02)
    assert auc_pac(res, 3) == pytest.approx((1 + 0.8 + 0.64) / 3, abs=0.02)
    assert res.auc[3] == auc_pac(res, 3)
    assert np.all(res.ci_low <= res.ratio) and np.all(res.ratio <= res.ci_high)


def test_persistent_risk_gives_flat_ratio():
    eps = [ErrorSeries(f"p{i}", (0, 1) + (1,) * 12) for i in range(10)]
    res = pac_ratio(eps, 5, n_boot=10)
    assert np.allclose(res.ratio, 1.0)
    assert pac_slope(eps, (1, 5)) == pytest.approx(0.0, abs=1e-12)


def test_tiny_first_lag_risk_is_flagged_unstable():
    eps = [ErrorSeries(f"p{i}", (1, 0, 0, 0, 1)) for i in range(10)]
    res = pac_ratio(eps, 4, n_boot=0)
    assert res.unstable and res.flags


def test_post_error_risk_counts_only_observed_lags():
    q, n = post_error_risk([ErrorSeries("a", (1, 1, 0)), ErrorSeries("b", (0, 0, 1))], 3)
    assert n.tolist() == [1, 1, 0]
    assert q[0] == 1.0 and q[1] == 0.0 and np.isnan(q[2])


@given(st.integers(0, 500), st.floats(0.1, 0.9))
def test_pac_ratio_range(seed, stay):
    res = pac_ratio(markov(80, 25, stay, 0.2, seed), 5, n_boot=20, rng=Rng(seed))
    ok = np.isfinite(res.ratio)
    assert res.ratio[0] == 1.0 and np.all(res.ratio[ok] >= 0)


def test_pac_slope_range_validation():
    with pytest.raises(ValueError):
        pac_slope(markov(10, 10, 0.5, 0.2, 0), (3, 3))
