import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from countiptw.data_model import Dataset, EnergySettings, GbmSettings, MethodId
from countiptw.dgm import DgmParams, default_params, generate_covariates, generate_exposure, generate_outcome
from countiptw.diagnostics import dependence_metric, ess, weighted_correlations
from countiptw.rng import substream
from countiptw.weights import (
    WeightError, WeightVector, cbps_weights, collapse_rare_levels, compute_weights, energy_weights, gbm_weights,
    multinomial_weights, npcbps_weights, project_simplex, standardize, winsorise,
)
from countiptw.weights.gbm import _TreeBuilder, kde_at_observed, silverman_bandwidth
from countiptw.weights.npcbps import el_weights, moment_matrix

from conftest import make_dataset


def independent_dataset(n, rep=0, dgm="negbin"):
    """Exposure generated without covariate effects."""
    base = default_params(dgm, 1.1)
    p = DgmParams((base.beta[0], 0.0, 0.0, 0.0), base.gamma, base.k, base.sigma, base.a_max, dgm)
    rng = substream(404, rep)
    cov = generate_covariates(n, p, rng.child(0))
    a = generate_exposure(cov, p, rng.child(1)).a
    y, pi = generate_outcome(cov, a, p, rng.child(2))
    return Dataset(c1=cov[0], c2=cov[1], c3=cov[2], a=a, y=y, true_pi=pi)


# -- standardisation ---------------------------------------------------------

def test_standardized_design(medium_ds):
    d = standardize(medium_ds.a, medium_ds.covariates)
    assert abs(d.a_star.mean()) < 1e-10 and abs(d.a_star.std(ddof=1) - 1) < 1e-10
    cov = np.cov(d.c_star.T)
    assert np.allclose(cov, np.eye(3), atol=1e-8)
    np.testing.assert_allclose((medium_ds.covariates - d.c_mean) @ d.whitening, d.c_star)


def test_standardize_constant_exposure():
    with pytest.raises(WeightError):
        standardize(np.ones(10), np.random.default_rng(0).normal(size=(10, 3)))


# -- collapse ----------------------------------------------------------------

def test_collapse_merges_sparse_top_levels():
    a = np.repeat([0, 1, 2, 3, 4], [500, 300, 150, 41, 9])
    labels, mapping = collapse_rare_levels(a)
    assert mapping == {0.0: 1, 1.0: 2, 2.0: 3, 3.0: 4, 4.0: 4}
    assert labels.max() == 4
    freq = np.bincount(labels)[1:] / a.size
    assert np.all(freq >= 0.01)


def test_collapse_identity_when_all_common():
    a = np.repeat([0, 1, 2], [40, 30, 30])
    labels, mapping = collapse_rare_levels(a)
    assert mapping == {0.0: 1, 1.0: 2, 2.0: 3}
    assert np.array_equal(labels, a + 1)


def test_collapse_constant_exposure():
    with pytest.raises(WeightError):
        collapse_rare_levels(np.full(20, 3.0))


@given(st.lists(st.integers(0, 10), min_size=2, max_size=300), st.floats(0.005, 0.3))
def test_collapse_is_order_preserving(a, threshold):
    a = np.asarray(a, dtype=float)
    if np.unique(a).size < 2:
        return
    try:
        labels, mapping = collapse_rare_levels(a, threshold)
    except WeightError:
        return
    keys = sorted(mapping)
    assert [mapping[k] for k in keys] == sorted(mapping[k] for k in keys)
    assert np.array_equal(labels, [mapping[v] for v in a])
    assert np.all(np.bincount(labels)[1:] / a.size >= threshold)


# -- multinomial -------------------------------------------------------------

def test_multinomial_toy_by_hand():
    c1 = np.array([0, 0, 0, 1, 1, 1.0])
    a = np.array([0, 0, 1, 0, 1, 1.0])
    ds = Dataset(c1=c1, c2=np.zeros(6), c3=np.zeros(6), a=a, y=np.zeros(6))
    wv = multinomial_weights(ds)
    # P(A=0)=1/2; P(A=0|c1=0)=2/3, P(A=1|c1=0)=1/3, and mirrored for c1=1
    expect = np.array([0.75, 0.75, 1.5, 1.5, 0.75, 0.75])
    np.testing.assert_allclose(wv.w, expect, rtol=1e-6)


@pytest.mark.slow
def test_multinomial_independent_exposure():
    wv = multinomial_weights(independent_dataset(100_000))
    assert abs(wv.w.mean() - 1) < 0.01 and wv.w.std() < 0.1


# -- CBPS --------------------------------------------------------------------

def test_cbps_balance_at_solution(medium_ds):
    wv = cbps_weights(medium_ds)
    d = standardize(medium_ds.a, medium_ds.covariates)
    resid = np.abs(d.c_star.T @ (wv.w * d.a_star)) / medium_ds.n
    assert np.all(resid < 1e-6)
    assert np.all(np.abs(weighted_correlations(medium_ds.a, medium_ds.covariates, wv.w)) < 1e-4)
    np.testing.assert_allclose(wv.w, wv.numerator / wv.denominator, rtol=1e-12)


@pytest.mark.slow
def test_cbps_independent_exposure():
    wv = cbps_weights(independent_dataset(100_000, 1))
    assert abs(wv.w.mean() - 1) < 0.02
    assert np.max(np.abs(wv.info["beta"][1:])) < 0.02


# -- npCBPS ------------------------------------------------------------------

def test_el_zero_moments_gives_unit_weights():
    w, lam, _ = el_weights(np.zeros((50, 7)))
    assert np.array_equal(w, np.ones(50)) and np.all(lam == 0)


def test_npcbps_constraints(medium_ds):
    wv = npcbps_weights(medium_ds)
    g = moment_matrix(medium_ds.a, medium_ds.covariates)
    assert np.max(np.abs(g.T @ wv.w)) / medium_ds.n < 1e-6
    assert wv.w.sum() == pytest.approx(medium_ds.n, rel=1e-8)
    assert np.all(wv.w > 0)


def test_el_is_the_likelihood_maximiser():
    # perturbing along the constraint null space lowers sum log w
    rng = np.random.default_rng(3)
    g = rng.normal(size=(80, 2)) + np.array([0.2, -0.1])
    w, _, _ = el_weights(g)
    A = np.column_stack([g, np.ones(80)]).T
    null = np.linalg.svd(A)[2][3:]
    for v in null[:5]:
        for t in (1e-3, -1e-3):
            assert np.sum(np.log(w + t * v)) < np.sum(np.log(w))


def test_el_infeasible():
    g = np.abs(np.random.default_rng(0).normal(size=(30, 1))) + 1.0  # zero is outside the hull
    with pytest.raises(WeightError):
        el_weights(g)


# -- GBM ---------------------------------------------------------------------

def test_tree_respects_depth_and_min_node(rng):
    X = rng.normal(size=(500, 3))
    r = np.sin(3 * X[:, 0]) + X[:, 1] + rng.normal(scale=0.1, size=500)
    for splits in (None, 3):
        tree, step = _TreeBuilder(X, max_depth=3, min_node=10).fit(r, 1.0, splits)
        assert tree.depth <= 3
        np.testing.assert_allclose(tree.predict(X), step)
        leaf_sizes = np.unique(step, return_counts=True)[1]
        assert leaf_sizes.min() >= 10
    assert tree.n_leaves == 4  # three best-first splits


def test_tree_is_least_squares_on_leaves(rng):
    X = rng.normal(size=(200, 2))
    r = (X[:, 0] > 0) * 2.0 + rng.normal(scale=0.01, size=200)
    tree, step = _TreeBuilder(X, 1, 5).fit(r, 1.0)
    for v in np.unique(step):
        np.testing.assert_allclose(v, r[step == v].mean())


def test_gbm_path_and_weights(small_ds):
    wv, model = gbm_weights(small_ds, GbmSettings(max_trees=150))
    assert model.balance_path[model.evaluated_m.tolist().index(model.chosen_m)] == model.balance_path.min()
    first = int(np.flatnonzero(model.balance_path == model.balance_path.min())[0])
    assert model.evaluated_m[first] == model.chosen_m  # ties go to the smaller ensemble
    np.testing.assert_allclose(wv.w, wv.numerator / wv.denominator, rtol=1e-12)
    np.testing.assert_allclose(model.predict(small_ds.covariates).mean(), small_ds.a.mean(), atol=0.2)
    assert all(t.depth <= 3 for t in model.trees)


def test_gbm_eval_every_and_underfit_flag(small_ds):
    _, model = gbm_weights(small_ds, GbmSettings(max_trees=20, eval_every=5, shrinkage=0.001))
    assert model.evaluated_m.tolist() == [5, 10, 15, 20]
    assert model.underfit_warning  # tiny shrinkage: still improving at the end


def test_gbm_kde_numerator(small_ds):
    wv, _ = gbm_weights(small_ds, GbmSettings(max_trees=30, numerator="kde"))
    np.testing.assert_allclose(wv.numerator, kde_at_observed(small_ds.a))


def test_kde_matches_direct_sum(rng):
    x = rng.integers(0, 5, size=60).astype(float)
    h = silverman_bandwidth(x)
    direct = np.array([np.mean(np.exp(-0.5 * ((xi - x) / h) ** 2) / (h * math.sqrt(2 * math.pi))) for xi in x])
    np.testing.assert_allclose(kde_at_observed(x), direct, rtol=1e-12)


@pytest.mark.slow
def test_gbm_independent_exposure():
    wv, model = gbm_weights(independent_dataset(10_000, 2), GbmSettings(max_trees=300))
    assert abs(wv.w.mean() - 1) < 0.05
    assert model.chosen_m < 300


# -- energy ------------------------------------------------------------------

@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.floats(0.5, 10))
def test_project_simplex(v, total):
    v = np.asarray(v)
    x = project_simplex(v, total)
    assert np.all(x >= 0) and abs(x.sum() - total) < 1e-9
    # optimality: x is no farther from v than random feasible points
    rng = np.random.default_rng(0)
    for _ in range(5):
        y = rng.dirichlet(np.ones(v.size)) * total
        assert np.sum((x - v) ** 2) <= np.sum((y - v) ** 2) + 1e-9


def test_energy_product_design_keeps_uniform_weights():
    # every (a, c) combination appears once, so uniform weights already give D = 0
    a_vals = np.array([0.0, 1, 2, 4])
    c = np.array([[0, -1.0, 0.5], [1, 0.3, -0.2], [0, 1.2, 1.1], [1, -0.4, -1.3], [1, 0.0, 0.2]])
    a = np.repeat(a_vals, len(c))
    cm = np.tile(c, (len(a_vals), 1))
    ds = Dataset(c1=cm[:, 0], c2=cm[:, 1], c3=cm[:, 2], a=a, y=np.zeros(a.size))
    wv = energy_weights(ds)
    assert wv.info["objective_uniform"] < 1e-12
    np.testing.assert_allclose(wv.w, 1.0, atol=1e-6)


def test_energy_objective_and_uniform_bound(small_ds):
    wv = energy_weights(small_ds)
    assert wv.info["objective"] <= wv.info["objective_uniform"]
    assert wv.w.sum() == pytest.approx(small_ds.n, rel=1e-12)
    assert abs(dependence_metric(small_ds.a, small_ds.covariates, wv.w) - wv.info["objective"]) < 1e-10
    assert ess(wv.w) < small_ds.n


def test_energy_two_solvers_agree():
    ds = make_dataset(n=120, rep=5)
    fast = energy_weights(ds, EnergySettings(algorithm="lbfgsb", tol=1e-12))
    slow = energy_weights(ds, EnergySettings(algorithm="spg", tol=1e-12, max_iter=50_000))
    f1, f2 = fast.info["objective"], slow.info["objective"]
    assert abs(f1 - f2) <= 1e-3 * f2
    assert abs(ess(fast.w) - ess(slow.w)) / ds.n < 0.01


# -- winsorisation -----------------------------------------------------------

def test_winsorise_constant_and_identity():
    wv = WeightVector(np.ones(10), MethodId.CBPS)
    assert np.array_equal(winsorise(wv).w, wv.w)
    assert winsorise(wv, 1.0) is wv
    with pytest.raises(ValueError):
        winsorise(wv, 0.0)


def test_winsorise_single_outlier():
    w = np.ones(100)
    w[-1] = 100.0
    out = winsorise(WeightVector(w, MethodId.GBM), 0.99)
    # type-7 quantile at 0.99 of 99 ones and one 100: 1 + 0.01 * 99
    assert out.w[-1] == pytest.approx(1.99)
    assert out.winsorised_at == 0.99
    assert np.array_equal(out.w[:-1], w[:-1])


@given(st.lists(st.floats(0, 1e3), min_size=2, max_size=200), st.floats(0.5, 1.0))
def test_winsorise_raises_ess(w, p):
    w = np.asarray(w)
    if w.sum() <= 0:
        return
    out = winsorise(WeightVector(w, MethodId.ENERGY), p)
    assert ess(out.w) >= ess(w) * (1 - 1e-12)


# -- shared behaviour ---------------------------------------------------------

@pytest.mark.parametrize("method", ["multinomial", "cbps", "npcbps", "gbm", "energy"])
def test_weights_well_formed(small_ds, method):
    wv = compute_weights(small_ds, method, GbmSettings(max_trees=100))
    assert np.all(wv.w >= 0) and np.all(np.isfinite(wv.w))
    assert 0.8 <= wv.w.mean() <= 1.25
    assert wv.method is MethodId(method)


@pytest.mark.slow
@pytest.mark.parametrize("method", ["multinomial", "cbps", "npcbps", "gbm", "energy"])
def test_no_worse_balance_on_balanced_data(method):
    worse = []
    for rep in range(50):
        ds = independent_dataset(300, 100 + rep)
        wv = compute_weights(ds, method, GbmSettings(max_trees=100))
        raw = np.abs(weighted_correlations(ds.a, ds.covariates, np.ones(ds.n))).mean()
        new = np.abs(weighted_correlations(ds.a, ds.covariates, wv.w)).mean()
        worse.append(new - raw)
    assert np.mean(worse) <= 0.01


def test_unknown_method_rejected(small_ds):
    with pytest.raises(ValueError):
        compute_weights(small_ds, "adjusted")
    incomplete = small_ds.with_columns(missing={"a": np.arange(small_ds.n) == 0})
    with pytest.raises(WeightError):
        compute_weights(incomplete, "cbps")
