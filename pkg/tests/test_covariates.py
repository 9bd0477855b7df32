import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivsmm.covariates import ResidualizedFrame, design_matrix, residualize
from ivsmm.data import AdherenceMode
from ivsmm.errors import CollinearityWarning, ValidationError
from ivsmm.estimation import fit
from ivsmm.inference import sandwich_variance
from ivsmm.simulation import SimConfig, simulate
from ivsmm.smm import SmmModel

from .conftest import random_frame


def with_covariates(frame, rng, **extra):
    cov = pd.DataFrame({"w": rng.normal(size=frame.n), "sex": rng.choice(["F", "M"], frame.n), **extra})
    return frame.replace(covariates=cov)


def test_intercept_only_centres():
    rng = np.random.default_rng(0)
    f = random_frame(rng, n=30, K=3)
    r = residualize(f, [])
    np.testing.assert_allclose(r.outcome, f.outcome - f.outcome.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(r.adherence, f.adherence, atol=1e-12)
    assert r.provenance.columns == ("(intercept)",)


def test_single_covariate_matches_polyfit():
    rng = np.random.default_rng(1)
    f = random_frame(rng, n=40, K=2)
    r = residualize(f, ["w"])
    w = f.covariates["w"].to_numpy()
    for k in range(2):
        slope, icpt = np.polyfit(w, f.outcome[:, k], 1)
        np.testing.assert_allclose(r.outcome[:, k], f.outcome[:, k] - icpt - slope * w, atol=1e-10)
        for arm in (0, 1):
            rows = f.arm == arm
            slope, icpt = np.polyfit(w[rows], f.adherence[rows, k], 1)
            a = f.adherence[rows, k]
            expected = a - icpt - slope * w[rows] + a.mean()
            np.testing.assert_allclose(r.adherence[rows, k], expected, atol=1e-10)


def test_residual_invariants():
    rng = np.random.default_rng(2)
    f = with_covariates(simulate(SimConfig(n=500, outcome_model="E2", seed=4)), rng)
    r = residualize(f, ["w", "sex"])
    assert isinstance(r, ResidualizedFrame)
    assert np.abs(r.outcome.mean(axis=0)).max() < 1e-8
    for arm in (0, 1):
        rows = f.arm == arm
        np.testing.assert_allclose(r.adherence[rows].mean(axis=0), f.adherence[rows].mean(axis=0))
        # the within-arm residual proper lies in (-1, 1)
        assert np.all(np.abs(r.adherence[rows] - f.adherence[rows].mean(axis=0)) < 1)
    assert r.provenance.outcome_coef.shape == (12, 3)
    np.testing.assert_array_equal(r.arm, f.arm)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_residualize_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    f = with_covariates(random_frame(rng, n=30, K=3), rng)
    once = residualize(f, ["w", "sex"])
    twice = residualize(once, ["w", "sex"])
    assert np.abs(twice.outcome - once.outcome).max() <= 1e-10
    assert np.abs(twice.adherence - once.adherence).max() <= 1e-10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_arms_are_never_mixed(seed):
    rng = np.random.default_rng(seed)
    f = with_covariates(random_frame(rng, n=30, K=3), rng)
    cov = f.covariates.copy()
    placebo = np.flatnonzero(f.arm == 0)
    cov.loc[placebo, "w"] = cov.loc[rng.permutation(placebo), "w"].to_numpy()
    a = residualize(f, ["w"])
    b = residualize(f.replace(covariates=cov), ["w"])
    treated = f.arm == 1
    np.testing.assert_allclose(a.adherence[treated], b.adherence[treated], atol=1e-12)


def test_categorical_one_hot_drops_first_level():
    cov = pd.DataFrame({"country": ["uk", "de", "us", "de"], "age": [30, 40, 50, 60]})
    X, cols = design_matrix(cov, ["country", "age"])
    assert cols == ["(intercept)", "country[uk]", "country[us]", "age"]
    np.testing.assert_array_equal(X[:, 1], [1, 0, 0, 0])


def test_collinear_columns_dropped_with_warning():
    rng = np.random.default_rng(3)
    f = random_frame(rng, n=30, K=2)
    cov = f.covariates.assign(w2=2 * f.covariates["w"], const=1.0)
    with pytest.warns(CollinearityWarning, match="w2"):
        r = residualize(f.replace(covariates=cov), ["w", "w2", "const"])
    assert set(r.provenance.dropped) == {"w2", "const"}
    np.testing.assert_allclose(r.outcome, residualize(f, ["w"]).outcome, atol=1e-10)


def test_missing_cells_skipped_and_kept():
    rng = np.random.default_rng(4)
    f = random_frame(rng, n=30, K=2)
    Y = f.outcome.copy()
    Y[3, 1] = np.nan
    r = residualize(f.replace(outcome=Y), ["w"])
    assert np.isnan(r.outcome[3, 1])
    keep = ~np.isnan(Y[:, 1])
    w = f.covariates["w"].to_numpy()[keep]
    slope, icpt = np.polyfit(w, Y[keep, 1], 1)
    np.testing.assert_allclose(r.outcome[keep, 1], Y[keep, 1] - icpt - slope * w, atol=1e-10)


def test_bad_covariates():
    rng = np.random.default_rng(5)
    f = random_frame(rng, n=10, K=1)
    with pytest.raises(ValidationError, match="not found"):
        residualize(f, ["bmi"])
    cov = f.covariates.copy()
    cov.loc[2, "w"] = np.nan
    with pytest.raises(ValidationError) as exc:
        residualize(f.replace(covariates=cov), ["w"])
    assert exc.value.row == 2


def test_irrelevant_covariates_leave_fit_unchanged():
    rng = np.random.default_rng(6)
    f = simulate(SimConfig(n=1961, seed=21)).replace(mode=AdherenceMode.TREATMENT_ONLY)
    f = f.replace(covariates=pd.DataFrame({"noise": rng.normal(size=f.n)}))
    m = SmmModel(AdherenceMode.TREATMENT_ONLY, f.schedule)
    centred = residualize(f, [])
    adjusted = residualize(f, ["noise"])
    a = fit(m, centred)
    b = fit(m, adjusted)
    se_a = sandwich_variance(m, a.theta_hat, centred).se
    se_b = sandwich_variance(m, b.theta_hat, adjusted).se
    np.testing.assert_array_less(np.abs(a.theta_hat.as_array() - b.theta_hat.as_array()), 2 * se_a)
    np.testing.assert_allclose(se_b, se_a, rtol=0.1)


def test_prognostic_covariate_shrinks_standard_errors():
    rng = np.random.default_rng(7)
    f = simulate(SimConfig(n=1961, outcome_model="E2", seed=22))
    base = rng.normal(size=f.n) * 3
    f = f.replace(outcome=f.outcome + base[:, None], covariates=pd.DataFrame({"base": base}))
    m = SmmModel(AdherenceMode.BOTH_ARMS, f.schedule)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        adj = residualize(f, ["base"])
    raw = fit(m, f)
    fitted = fit(m, adj)
    se_raw = sandwich_variance(m, raw.theta_hat, f).se
    se_adj = sandwich_variance(m, fitted.theta_hat, adj).se
    assert np.all(se_adj < se_raw)


def test_residualized_replace_keeps_provenance():
    rng = np.random.default_rng(8)
    r = residualize(random_frame(rng, n=12, K=2), ["w"])
    sub = r.subset(np.arange(6))
    assert isinstance(sub, ResidualizedFrame)
    assert sub.provenance is r.provenance
