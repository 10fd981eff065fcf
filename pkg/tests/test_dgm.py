import math

import numpy as np
import pytest

from countiptw.data_model import ScenarioConfig
from countiptw.dgm import (
    DgmParams, GenerationError, default_params, generate_covariates, generate_dataset, generate_exposure,
    generate_outcome, outcome_probability,
)
from countiptw.glm import fit_glm
from countiptw.rng import substream


def test_default_params():
    p = default_params("negbin", 1.1)
    assert p.gamma[1] == pytest.approx(0.0953102, abs=1e-6)
    assert p.beta[0] == pytest.approx(0.405465, abs=1e-6)
    assert p.beta[1:] == (0.4, 0.1, 0.1)
    assert p.gamma[0] == math.log(0.03) and p.gamma[2] == math.log(1.4)
    assert p.k == 1.3 and p.a_max == 10
    assert default_params("poisson", 1.0).gamma[1] == 0.0
    with pytest.raises(ValueError):
        default_params("negbin", 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        DgmParams((0, 0, 0, 0), (0, 0, 0, 0, 0), 1.0, 2 * np.eye(3), 10, "negbin")
    with pytest.raises(ValueError):
        DgmParams((0, 0, 0, 0), (0, 0, 0, 0, 0), 0.0, np.eye(3), 10, "negbin")


def test_covariates_large_sample():
    p = default_params("negbin", 1.1)
    c1, c2, c3 = generate_covariates(10**6, p, substream(5, 0))
    assert abs(c1.mean() - 0.5) < 0.002
    assert set(np.unique(c1)) == {0.0, 1.0}
    assert abs(np.corrcoef(c2, c3)[0, 1] - 0.3) < 0.005


def test_identity_covariance_uncorrelated():
    base = default_params("negbin", 1.1)
    p = DgmParams(base.beta, base.gamma, base.k, np.eye(3), 10, "negbin")
    _, c2, c3 = generate_covariates(10**6, p, substream(5, 1))
    assert abs(np.corrcoef(c2, c3)[0, 1]) < 0.005


def test_no_confounding_poisson_mean():
    p = DgmParams((math.log(1.5), 0, 0, 0), (math.log(0.03), 0, 0, 0, 0), 1.3, np.eye(3), 10**6, "poisson")
    cov = generate_covariates(10**6, p, substream(5, 2))
    a = generate_exposure(cov, p, substream(5, 3)).a
    assert abs(a.mean() - 1.5) < 0.01
    y, pi = generate_outcome(cov, a, p, substream(5, 4))
    assert np.allclose(pi, 0.03)
    assert abs(y.mean() - 0.03) < 0.001


def test_true_pi_matches_linear_predictor():
    ds = generate_dataset(ScenarioConfig("negbin", 1.2, ("cbps",), n_obs=500), substream(9, 0))
    p = default_params("negbin", 1.2)
    g = p.gamma
    expect = np.exp(g[0] + g[1] * ds.a + g[2] * ds.c1 + g[3] * ds.c2 + g[4] * ds.c3)
    assert np.array_equal(ds.true_pi, expect)
    assert ds.a.max() <= 10 and ds.a.min() >= 0
    assert ds.is_complete and ds.n == 500


def test_dataset_determinism():
    cfg = ScenarioConfig("poisson", 1.1, ("cbps",), n_obs=300)
    assert generate_dataset(cfg, substream(1, 4)).equals(generate_dataset(cfg, substream(1, 4)))
    assert not generate_dataset(cfg, substream(1, 4)).equals(generate_dataset(cfg, substream(1, 5)))


def test_outcome_probability_guard():
    p = default_params("negbin", 3.0)
    cov = (np.ones(3), np.full(3, 4.0), np.full(3, 4.0))
    assert np.all(outcome_probability(cov, np.full(3, 10.0), p) >= 1)
    with pytest.raises(GenerationError):
        generate_outcome(cov, np.full(3, 10.0), p, substream(0, 0))


def test_rejection_bound():
    import countiptw.dgm as dgm

    p = DgmParams((math.log(50.0), 0, 0, 0), (math.log(0.03), 0, 0, 0, 0), 1.3, np.eye(3), 0, "poisson")
    cov = (np.zeros(2), np.zeros(2), np.zeros(2))
    old = dgm.MAX_REDRAWS
    dgm.MAX_REDRAWS = 50
    try:
        with pytest.raises(GenerationError):
            generate_exposure(cov, p, substream(0, 0))
    finally:
        dgm.MAX_REDRAWS = old


@pytest.mark.slow
@pytest.mark.parametrize("dgm,mean,sd,rr", [("negbin", 1.81, 2.04, 1.13), ("poisson", 1.91, 1.49, 1.17)])
def test_large_sample_characteristics(dgm, mean, sd, rr):
    ds = generate_dataset(ScenarioConfig(dgm, 1.1, ("cbps",), n_obs=10**6), substream(2024, 0))
    assert abs(ds.a.mean() - mean) < 0.02
    assert abs(ds.a.std(ddof=1) - sd) < (0.03 if dgm == "negbin" else 0.02)
    assert abs(ds.y.mean() - 0.045) < 0.002
    fit = fit_glm(np.column_stack([np.ones(ds.n), ds.a]), ds.y, "poisson_log")
    assert abs(math.exp(fit.coefficients[1]) - rr) < 0.01
    if dgm == "negbin":
        assert np.median(ds.a) == 1


def test_sample_characteristics():
    from countiptw.dgm import sample_characteristics

    ds = generate_dataset(ScenarioConfig("negbin", 1.1, ("cbps",), n_obs=20000), substream(3, 0))
    s = sample_characteristics(ds, 0.01)
    assert s["a_mean"] == pytest.approx(ds.a.mean())
    assert s["redrawn_share"] == 0.01
    # dichotomising at zero shrinks a 0.3 correlation by sqrt(2 / pi)
    assert s["corr_c1_c2"] == pytest.approx(0.3 * math.sqrt(2 / math.pi), abs=0.02)
    assert s["corr_c2_c3"] == pytest.approx(0.3, abs=0.02)
