import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivsmm.data import AdherenceMode, TimeSchedule
from ivsmm.errors import IncompleteRowError, ValidationError, WeakInstrumentError
from ivsmm.smm import (
    ScoreFunction,
    SmmModel,
    ThetaVector,
    WeightMatrix,
    effect_coefficient,
    score,
    subject_residual,
    wald_ratio,
)

from .conftest import make_frame, random_frame

TO = AdherenceMode.TREATMENT_ONLY
BA = AdherenceMode.BOTH_ARMS


def model_for(frame, mode=None):
    return SmmModel(mode or frame.mode, frame.schedule)


def loop_score(model, theta, frame, W=None):
    """Score by explicit per-subject loops over effect_coefficient."""
    K = frame.K
    W = np.eye(K) if W is None else W
    R = frame.arm.astype(float)
    Rbar = R.mean()
    total = np.zeros(K)
    for i in range(frame.n):
        res = np.empty(K)
        for k in range(1, K + 1):
            v = frame.outcome[i, k - 1]
            for j in range(1, k + 1):
                v -= effect_coefficient(model, theta, k, j, int(R[i])) * frame.adherence[i, j - 1]
            res[k - 1] = v
        total += (R[i] - Rbar) * (W @ res)
    return total


# -- theta and model -----------------------------------------------------------


def test_theta_vector():
    th = ThetaVector(-1.1, 0.95)
    assert th.mode is TO and th.names == ("beta", "alpha")
    assert ThetaVector(-1.1, 0.95, -0.9).as_dict() == {"beta": -1.1, "alpha": 0.95, "gamma": -0.9}
    with pytest.raises(ValidationError):
        ThetaVector(-1.1, 0.0)
    with pytest.raises(ValidationError):
        SmmModel(BA, TimeSchedule.unit(3)).check_theta((1.0, 1.0))


# -- effect coefficients ------------------------------------------------------


def test_effect_coefficient_examples():
    m = SmmModel(TO, TimeSchedule.unit(3))
    th = ThetaVector(-1.1, 0.95)
    assert effect_coefficient(m, th, 2, 2, 1) == pytest.approx(-1.1)
    assert effect_coefficient(m, ThetaVector(-1.1, 1.0), 3, 1, 1) == pytest.approx(-1.1)
    assert effect_coefficient(m, th, 3, 1, 1) == pytest.approx(-1.1 * 0.95**2)
    with pytest.raises(IndexError):
        effect_coefficient(m, th, 1, 2, 1)


def test_week_two_effect_on_week_68():
    weeks = (2, 4, 8, 12, 16, 20, 28, 36, 44, 52, 60, 68)
    m = SmmModel(TO, TimeSchedule(weeks))
    value = effect_coefficient(m, ThetaVector(-1.17, 1.0021), 12, 1, 1)
    assert value == pytest.approx(-1.35, abs=0.01)


def test_placebo_coefficient_is_instantaneous():
    m = SmmModel(BA, TimeSchedule.unit(3))
    th = ThetaVector(-1.1, 0.95, -0.9)
    assert effect_coefficient(m, th, 2, 2, 0) == -0.9
    assert effect_coefficient(m, th, 3, 1, 0) == 0.0
    assert effect_coefficient(m, th, 3, 1, 1) == pytest.approx(-1.1 * 0.95**2)


@given(
    beta=st.floats(-5, 5).filter(lambda b: abs(b) > 1e-6),
    alpha=st.floats(0.05, 0.999),
)
def test_effect_decays_with_lag(beta, alpha):
    m = SmmModel(TO, TimeSchedule((1, 2.5, 4, 9)))
    th = ThetaVector(beta, alpha)
    mags = [abs(effect_coefficient(m, th, 4, j, 1)) for j in (4, 3, 2, 1)]
    assert all(a >= b for a, b in zip(mags, mags[1:]))
    flat = [effect_coefficient(m, ThetaVector(beta, 1.0), 4, j, 1) for j in (1, 2, 3, 4)]
    assert len(set(flat)) == 1


def test_unequal_spacing_uses_time_not_index():
    m = SmmModel(TO, TimeSchedule((2, 4, 8)))
    assert effect_coefficient(m, ThetaVector(1.0, 0.5), 3, 1, 1) == pytest.approx(0.5**6)


# -- residuals ------------------------------------------------------------------


def test_subject_residual_examples():
    m = SmmModel(TO, TimeSchedule.unit(2))
    y = np.array([-2.0, -3.0])
    np.testing.assert_allclose(subject_residual(m, ThetaVector(-1.0, 1.0), 1, [1, 1], y), [-1.0, -1.0])
    np.testing.assert_array_equal(subject_residual(m, ThetaVector(0.0, 1.0), 1, [1, 1], y), y)
    np.testing.assert_array_equal(subject_residual(m, ThetaVector(-3.0, 0.7), 0, [0, 0], y), y)
    with pytest.raises(IncompleteRowError):
        subject_residual(m, ThetaVector(-1.0, 1.0), 1, [1, np.nan], y)


def test_both_arms_residual_removes_placebo_effect():
    m = SmmModel(BA, TimeSchedule.unit(2))
    r = subject_residual(m, ThetaVector(-1.0, 0.5, -0.4), 0, [1, 0], [-0.4, 0.0])
    np.testing.assert_allclose(r, [0.0, 0.0])


# -- score ----------------------------------------------------------------------


def test_two_subject_score(two_subject):
    m = model_for(two_subject, TO)
    for beta in (-3.0, 0.0, 0.5, 2.0, 7.0):
        s = score(m, ThetaVector(beta, 1.0), two_subject).total
        assert s[0] == pytest.approx(1 - beta / 2)


def test_balanced_identical_outcomes_give_zero_score():
    f = make_frame([1, 0, 1, 0], [[1, 0], [0, 1], [1, 1], [0, 0]], [[1, 2]] * 4)
    s = ScoreFunction(model_for(f, TO), f).total(ThetaVector(0.0, 1.0))
    np.testing.assert_allclose(s, 0.0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), mode=st.sampled_from([TO, BA]))
def test_vectorized_score_matches_loops(seed, mode):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, n=12, K=3, mode=mode)
    m = model_for(f)
    theta = (rng.normal(), rng.uniform(0.3, 1.5)) + ((rng.normal(),) if mode is BA else ())
    W = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
    sf = ScoreFunction(m, f, WeightMatrix(W))
    np.testing.assert_allclose(sf.total(theta), loop_score(m, theta, f, W), atol=1e-10)
    np.testing.assert_allclose(sf.per_subject(theta).sum(axis=0), sf.total(theta), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), mode=st.sampled_from([TO, BA]))
def test_score_is_linear_in_outcomes(seed, mode):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, n=15, K=4, mode=mode)
    m = model_for(f)
    theta = (rng.normal(), rng.uniform(0.3, 1.5)) + ((rng.normal(),) if mode is BA else ())
    Y1, Y2 = rng.normal(size=(2, f.n, f.K))

    def s(Y):
        return ScoreFunction(m, f.replace(outcome=Y)).total(theta)

    np.testing.assert_allclose(s(Y1 + Y2), s(Y1) + s(Y2) - s(np.zeros_like(Y1)), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-1e3, 1e3))
def test_score_is_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, n=15, K=3)
    m = model_for(f)
    theta = (rng.normal(), rng.uniform(0.3, 1.5), rng.normal())
    base = ScoreFunction(m, f).total(theta)
    moved = ScoreFunction(m, f.replace(outcome=f.outcome + shift)).total(theta)
    np.testing.assert_allclose(moved, base, atol=1e-9 * max(1.0, abs(shift)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_both_arms_with_zero_gamma_matches_treatment_only(seed):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, n=15, K=3, mode=TO)
    theta = (rng.normal(), rng.uniform(0.3, 1.5))
    ba = f.replace(mode=BA)
    s_to = ScoreFunction(model_for(f), f).total(theta)
    s_ba = ScoreFunction(model_for(ba), ba).total(theta + (0.0,))
    np.testing.assert_allclose(s_ba, s_to, atol=1e-12)


def test_score_refuses_incomplete_rows():
    f = make_frame([1, 0], [[1, 1], [0, 0]], [[1, np.nan], [0, 0]])
    with pytest.raises(IncompleteRowError, match="impute"):
        ScoreFunction(model_for(f), f)


def test_identification_errors():
    f = make_frame([1, 0, 1, 0], np.zeros((4, 2)), np.ones((4, 2)))
    with pytest.raises(WeakInstrumentError) as exc:
        score(model_for(f, TO), ThetaVector(0.0, 1.0), f)
    assert exc.value.parameter == "beta"
    g = make_frame([1, 0, 1, 0], [[1, 1], [0, 0], [0, 1], [0, 0]], np.ones((4, 2)))
    with pytest.raises(WeakInstrumentError) as exc:
        score(model_for(g, BA), ThetaVector(0.0, 1.0, 0.0), g)
    assert exc.value.parameter == "gamma"


# -- Wald ratio -----------------------------------------------------------------


def test_wald_ratio_examples(two_subject):
    assert wald_ratio(two_subject, 1) == pytest.approx(2.0)
    same = make_frame([1, 0, 1, 0], [1, 0, 0, 0], [3.0, 3.0, 3.0, 3.0])
    assert wald_ratio(same, 1) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_wald_ratio_with_full_compliance_is_arm_difference(seed):
    rng = np.random.default_rng(seed)
    arm = np.r_[0, 1, rng.integers(0, 2, 10)]
    Y = rng.normal(size=12)
    f = make_frame(arm, arm, Y)
    diff = Y[arm == 1].mean() - Y[arm == 0].mean()
    assert wald_ratio(f, 1) == pytest.approx(diff, rel=1e-10, abs=1e-12)


def test_wald_ratio_zero_denominator():
    f = make_frame([1, 0], [1, 1], [2.0, 0.0])
    with pytest.raises(WeakInstrumentError):
        wald_ratio(f, 1)
    with pytest.raises(IndexError):
        wald_ratio(f, 2)


def test_weight_matrix():
    assert WeightMatrix.identity(3).K == 3
    np.testing.assert_allclose(WeightMatrix.from_sigma(2 * np.eye(2)).sigma_inverse, 0.5 * np.eye(2))
    with pytest.raises(ValidationError):
        WeightMatrix(np.ones((2, 3)))
    with pytest.raises(ValidationError):
        WeightMatrix(np.array([[1.0, np.nan], [0.0, 1.0]]))
