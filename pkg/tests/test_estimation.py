import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivsmm.data import AdherenceMode
from ivsmm.errors import IdentificationError, ValidationError
from ivsmm.estimation import FitConfig, fit, starting_values
from ivsmm.inference import sandwich_variance
from ivsmm.smm import ScoreFunction, SmmModel, ThetaVector, wald_ratio

from .conftest import make_frame

TO = AdherenceMode.TREATMENT_ONLY
BA = AdherenceMode.BOTH_ARMS


def test_two_subject_fit_is_the_wald_ratio(two_subject):
    res = fit(SmmModel(TO, two_subject.schedule), two_subject)
    assert res.converged
    assert res.theta_hat.beta == pytest.approx(2.0, abs=1e-8)
    assert res.fixed == ("alpha",) and res.theta_hat.alpha == 1.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_single_timepoint_fit_matches_wald_ratio(seed):
    rng = np.random.default_rng(seed)
    n = 20
    arm = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    A = ((rng.random(n) < 0.8) & (arm == 1)).astype(float)
    if A.sum() == 0:
        A[1] = 1.0
    f = make_frame(arm, A, rng.normal(size=n) * 3, mode=TO)
    res = fit(SmmModel(TO, f.schedule), f)
    assert res.theta_hat.beta == pytest.approx(wald_ratio(f, 1), abs=1e-6)


def test_fit_recovers_truth_e1(e1_frame):
    m = SmmModel(TO, e1_frame.schedule)
    res = fit(m, e1_frame)
    se = sandwich_variance(m, res.theta_hat, e1_frame).se
    assert res.converged
    assert abs(res.theta_hat.beta + 1.1) < 3 * se[0]
    assert abs(res.theta_hat.alpha - 0.95) < 3 * se[1]


def test_fit_recovers_truth_e2(e2_frame):
    m = SmmModel(BA, e2_frame.schedule)
    res = fit(m, e2_frame)
    se = sandwich_variance(m, res.theta_hat, e2_frame).se
    assert res.converged
    np.testing.assert_array_less(np.abs(res.theta_hat.as_array() - [-1.1, 0.95, -0.9]), 3 * se)


def test_optimum_beats_every_start(e2_frame):
    m = SmmModel(BA, e2_frame.schedule)
    res = fit(m, e2_frame)
    assert res.objective_at_optimum <= res.start_objective
    assert all(res.objective_at_optimum <= obj for _, obj in res.candidates)
    sf = ScoreFunction(m, e2_frame)
    # first-order condition of S'S: the score is orthogonal to its Jacobian
    grad = sf.jacobian(res.theta_hat).T @ res.score_at_optimum
    scale = np.linalg.norm(sf.jacobian(res.theta_hat), axis=0) * max(1.0, np.linalg.norm(sf.a))
    assert np.all(np.abs(grad) <= 1e-6 * scale)


def test_fit_ignores_subject_order(e1_frame):
    m = SmmModel(TO, e1_frame.schedule)
    perm = np.random.default_rng(3).permutation(e1_frame.n)
    a = fit(m, e1_frame).theta_hat.as_array()
    b = fit(m, e1_frame.subset(perm)).theta_hat.as_array()
    np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-9)


def test_starting_values(e2_frame):
    sf = ScoreFunction(SmmModel(BA, e2_frame.schedule), e2_frame)
    cands, objs = starting_values(sf)
    assert objs == sorted(objs)
    assert all(c.alpha == 1.0 for c in cands)
    placebo = e2_frame.arm == 0
    a1 = e2_frame.adherence[placebo, 0]
    y1 = e2_frame.outcome[placebo, 0]
    diff = y1[a1 == 1].mean() - y1[a1 == 0].mean()
    assert cands[0].gamma == pytest.approx(diff)
    betas = {c.beta for c in cands}
    assert wald_ratio(e2_frame, e2_frame.K, adherence=e2_frame.treated_adherence()) in betas


def test_budget_exhaustion_is_flagged(e2_frame):
    res = fit(SmmModel(BA, e2_frame.schedule), e2_frame, config=FitConfig(max_iterations=1, n_restarts=1))
    assert not res.converged
    assert res.restarts == 1


def test_fixed_alpha(e2_frame):
    res = fit(SmmModel(BA, e2_frame.schedule), e2_frame, config=FitConfig(fixed_alpha=0.9))
    assert res.theta_hat.alpha == 0.9 and res.fixed == ("alpha",)
    assert res.converged


def test_unidentified_alpha_falls_back_to_simplex():
    # treated subjects can only adhere at the last visit, so alpha never
    # enters the score and the Gauss-Newton system is singular
    rng = np.random.default_rng(5)
    n = 200
    arm = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    A = np.zeros((n, 3))
    A[:, 2] = (rng.random(n) < 0.7) * arm
    Y = rng.normal(size=(n, 3)) - 1.0 * A
    f = make_frame(arm, A, Y, mode=TO)
    m = SmmModel(TO, f.schedule)
    res = fit(m, f)
    assert res.fallback == "simplex-only"
    with pytest.raises(IdentificationError) as exc:
        sandwich_variance(m, res.theta_hat, f)
    assert exc.value.parameter == "alpha"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_iterations": 0},
        {"objective_tolerance": 0.0},
        {"parameter_tolerance": -1.0},
        {"n_restarts": -1},
        {"fixed_alpha": 0.0},
    ],
)
def test_fit_config_validation(kwargs):
    with pytest.raises(ValidationError):
        FitConfig(**kwargs)


def test_explicit_start(e1_frame):
    m = SmmModel(TO, e1_frame.schedule)
    res = fit(m, e1_frame, config=FitConfig(starting_theta=ThetaVector(-0.5, 0.9)))
    assert res.start_theta.as_array().tolist() == [-0.5, 0.9]
    np.testing.assert_allclose(res.theta_hat.as_array(), fit(m, e1_frame).theta_hat.as_array(), rtol=1e-6)
