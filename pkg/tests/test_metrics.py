import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from countiptw.data_model import MethodId, ReplicationResult, WeightDiagnostics
from countiptw.metrics import MetricsError, PerfRow, summarize, summarize_all


def rep(i, theta, var, lo=None, hi=None, method="cbps", winsorised=False, ess=None):
    se = math.sqrt(var)
    lo = theta - 1.96 * se if lo is None else lo
    hi = theta + 1.96 * se if hi is None else hi
    diag = None if ess is None else WeightDiagnostics(ess, (0.01, 0.02, 0.03), 0.02)
    return ReplicationResult(i, MethodId(method), winsorised, theta, var, lo, hi, diag)


def test_perfect_case():
    rows = [rep(i, 0.1, 0.01) for i in range(10)]
    p = summarize(rows, 0.1)
    assert p.bias == 0 and p.coverage == 1 and p.coverage_mcse == 0
    assert p.empirical_se == 0 and p.model_se == pytest.approx(0.1)


def test_planning_mcse():
    n = 2000
    rows = [rep(i, 0.0, 1.0, -1, 1) if i < 1900 else rep(i, 1.0, 1.0, 0.5, 1.5) for i in range(n)]
    p = summarize(rows, 0.0)
    assert p.coverage == 0.95
    assert p.coverage_mcse == pytest.approx(0.00487, abs=5e-6)


def test_hand_five_replications():
    thetas = (0.08, 0.12, 0.11, 0.15, 0.09)
    vars_ = (0.0004, 0.0009, 0.0001, 0.0004, 0.0016)
    cis = ((0.05, 0.11), (0.09, 0.15), (0.105, 0.115), (0.12, 0.18), (0.01, 0.17))
    rows = [rep(i, t, v, lo, hi, ess=1000 + 100 * i) for i, (t, v, (lo, hi)) in enumerate(zip(thetas, vars_, cis))]
    rows.append(ReplicationResult.failure(5, MethodId.CBPS, False, "boom"))
    p = summarize(rows, 0.1, "s", "cbps")
    # values from a hand-filled spreadsheet
    assert p.n_reps_used == 5 and p.n_failed == 1
    assert p.mean_theta == pytest.approx(0.11, abs=1e-15)
    assert p.bias == pytest.approx(0.01, abs=1e-15)
    assert p.empirical_se == pytest.approx(0.0273861279, abs=1e-10)
    assert p.bias_mcse == pytest.approx(0.0122474487, abs=1e-10)
    assert p.rel_bias_pct == pytest.approx(10.0, abs=1e-12)
    assert p.rel_bias_mcse == pytest.approx(12.2474487, abs=1e-6)
    assert p.model_se == pytest.approx(0.0260768096, abs=1e-10)
    assert p.coverage == pytest.approx(0.6)
    assert p.coverage_mcse == pytest.approx(0.2190890230, abs=1e-10)
    assert p.ess_mean == 1200 and p.ess_sd == pytest.approx(158.113883, abs=1e-6)
    assert p.ess_p05 == pytest.approx(1020) and p.ess_p95 == pytest.approx(1380)
    assert p.mean_abs_rho == pytest.approx(0.02)
    assert list(p.as_dict()) == PerfRow.columns()


def test_null_effect_suppresses_relative_bias():
    p = summarize([rep(0, 0.01, 0.01), rep(1, -0.03, 0.01)], 0.0)
    assert math.isnan(p.rel_bias_pct) and math.isnan(p.rel_bias_mcse)


def test_all_failed_raises():
    with pytest.raises(MetricsError):
        summarize([ReplicationResult.failure(0, MethodId.CBPS, False, "x")], 0.1)


thetas = st.lists(st.floats(-1, 1), min_size=2, max_size=30)


@given(thetas, st.floats(0.01, 1.0), st.randoms())
def test_permutation_invariance_and_sign(ts, theta_true, rnd):
    rows = [rep(i, t, 0.01) for i, t in enumerate(ts)]
    p = summarize(rows, theta_true)
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    q = summarize(shuffled, theta_true)
    assert q.bias == pytest.approx(p.bias, abs=1e-12)
    assert q.empirical_se == pytest.approx(p.empirical_se, abs=1e-12)
    assert q.coverage == p.coverage
    assert 0 <= p.coverage <= 1
    assert p.coverage_mcse == pytest.approx(math.sqrt(p.coverage * (1 - p.coverage) / len(ts)))
    if abs(p.bias) > 1e-12:
        assert np.sign(p.rel_bias_pct) == np.sign(p.bias)


@given(thetas)
def test_adding_mean_replication(ts):
    rows = [rep(i, t, 0.01) for i, t in enumerate(ts)]
    p = summarize(rows, 0.1)
    q = summarize(rows + [rep(len(ts), p.mean_theta, 0.01)], 0.1)
    assert q.bias == pytest.approx(p.bias, abs=1e-12)
    assert q.bias_mcse <= p.bias_mcse + 1e-12


def test_summarize_all_groups():
    rows = [rep(i, 0.1 + 0.01 * i, 0.01, method=m, winsorised=w)
            for i in range(3) for m in ("cbps", "energy") for w in (False, True)]
    out = summarize_all(rows, 0.1, "s")
    assert {(r.method, r.winsorised) for r in out} == {(m, w) for m in ("cbps", "energy") for w in (False, True)}
    assert all(r.n_reps_used == 3 for r in out)
