"""Decay structural mean models and their G-estimation score.

Two models share one score. Treatment adherence at time ``t_j`` shifts the
outcome at ``t_k >= t_j`` by ``beta * alpha**(t_k - t_j)``. In the both-arms
model, placebo adherence shifts the same-time outcome by ``gamma`` and has no
lasting effect. Subtracting these effects from the observed outcomes gives
adherence-free outcomes. G-estimation picks the parameters that make those
outcomes uncorrelated with randomization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AdherenceMode
from .errors import IdentificationError, IncompleteRowError, ValidationError, WeakInstrumentError

PARAM_NAMES = {
    AdherenceMode.TREATMENT_ONLY: ("beta", "alpha"),
    AdherenceMode.BOTH_ARMS: ("beta", "alpha", "gamma"),
}


@dataclass(frozen=True)
class ThetaVector:
    """Causal parameters on the natural scale.

    beta: immediate effect of one adherent interval (outcome units).
    alpha: per-week multiplier applied to that effect afterwards.
    gamma: instantaneous placebo effect; present only in the both-arms model.
    """

    beta: float
    alpha: float
    gamma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.gamma is not None:
            object.__setattr__(self, "gamma", float(self.gamma))
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}", field="alpha")

    @property
    def mode(self):
        return AdherenceMode.TREATMENT_ONLY if self.gamma is None else AdherenceMode.BOTH_ARMS

    @property
    def names(self):
        return PARAM_NAMES[self.mode]

    def as_array(self):
        vals = [self.beta, self.alpha] + ([] if self.gamma is None else [self.gamma])
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, values, mode=None):
        values = np.asarray(values, dtype=float).ravel()
        if mode is not None:
            expected = len(PARAM_NAMES[AdherenceMode.parse(mode)])
            if values.size != expected:
                raise ValidationError(
                    f"{AdherenceMode.parse(mode).value} model takes {expected} parameters, "
                    f"got {values.size}",
                    field="theta",
                )
        if values.size == 2:
            return cls(values[0], values[1])
        if values.size == 3:
            return cls(values[0], values[1], values[2])
        raise ValidationError(f"theta must have 2 or 3 entries, got {values.size}", field="theta")

    def as_dict(self):
        return dict(zip(self.names, self.as_array().tolist()))


@dataclass(frozen=True)
class WeightMatrix:
    """Inverse weighting matrix applied inside the score (identity by default)."""

    sigma_inverse: np.ndarray

    def __post_init__(self):
        m = np.array(self.sigma_inverse, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("weight matrix must be square", field="sigma_inverse")
        if not np.all(np.isfinite(m)):
            raise ValidationError("weight matrix has non-finite entries", field="sigma_inverse")
        m.setflags(write=False)
        object.__setattr__(self, "sigma_inverse", m)

    @classmethod
    def identity(cls, K):
        return cls(np.eye(K))

    @classmethod
    def from_sigma(cls, sigma):
        return cls(np.linalg.inv(np.asarray(sigma, dtype=float)))

    @property
    def K(self):
        return self.sigma_inverse.shape[0]


@dataclass(frozen=True)
class SmmModel:
    mode: AdherenceMode
    schedule: object

    def __post_init__(self):
        object.__setattr__(self, "mode", AdherenceMode.parse(self.mode))

    @property
    def K(self):
        return self.schedule.K

    @property
    def param_names(self):
        return PARAM_NAMES[self.mode]

    @property
    def n_params(self):
        return len(self.param_names)

    def check_theta(self, theta):
        if isinstance(theta, ThetaVector):
            arr = theta.as_array()
        else:
            arr = np.asarray(theta, dtype=float).ravel()
        if arr.size != self.n_params:
            raise ValidationError(
                f"{self.mode.value} model takes {self.n_params} parameters, got {arr.size}",
                field="theta",
            )
        if not arr[1] > 0:
            raise ValidationError(f"alpha must be positive, got {arr[1]}", field="alpha")
        return arr

    def decay_matrix(self, alpha):
        """Lower-triangular ``M[k, j] = alpha**(t_k - t_j)`` for ``j <= k``."""
        lags = self.schedule.lags()
        lower = np.tril(np.ones_like(lags, dtype=bool))
        return np.where(lower, np.power(alpha, np.where(lower, lags, 0.0)), 0.0)

    def decay_matrix_dalpha(self, alpha):
        """Elementwise derivative of ``decay_matrix`` with respect to alpha."""
        lags = self.schedule.lags()
        lower = np.tril(np.ones_like(lags, dtype=bool))
        safe = np.where(lower, lags, 0.0)
        return np.where(lower, safe * np.power(alpha, safe - 1.0), 0.0)


def effect_coefficient(model, theta, k, j, arm):
    """Effect of adherence at time point ``j`` on the outcome at ``k`` (1-based).

    Treatment arm, or any arm under the treatment-only model:
    ``beta * alpha**(t_k - t_j)``. Placebo arm under the both-arms model:
    ``gamma`` when ``j == k`` and 0 otherwise.
    """
    arr = model.check_theta(theta)
    K = model.K
    if not (1 <= j <= K and 1 <= k <= K):
        raise IndexError(f"time indices must lie in 1..{K}, got k={k}, j={j}")
    if j > k:
        raise IndexError(f"adherence at j={j} cannot affect an earlier outcome k={k}")
    if int(arm) == 0 and model.mode is AdherenceMode.BOTH_ARMS:
        return arr[2] if j == k else 0.0
    t = model.schedule.times
    return arr[0] * arr[1] ** (t[k - 1] - t[j - 1])


def subject_residual(model, theta, arm, adherence, outcome):
    """Predicted adherence-free outcome vector ``Y_k(., 0_k)`` for one subject."""
    arr = model.check_theta(theta)
    A = np.asarray(adherence, dtype=float)
    Y = np.asarray(outcome, dtype=float)
    if A.shape != (model.K,) or Y.shape != (model.K,):
        raise ValidationError(f"subject vectors must have length {model.K}", field="row")
    if np.isnan(A).any() or np.isnan(Y).any():
        raise IncompleteRowError(
            "subject has missing adherence or outcome cells; impute upstream "
            "(multiple imputation) before computing residuals"
        )
    R = float(arm)
    M = model.decay_matrix(arr[1])
    r = Y - arr[0] * (M @ (A * R))
    if model.mode is AdherenceMode.BOTH_ARMS:
        r = r - arr[2] * A * (1.0 - R)
    return r


@dataclass(frozen=True)
class ScoreResult:
    total: np.ndarray
    per_subject: np.ndarray


class ScoreFunction:
    """Score, residuals and analytic derivatives for one model and frame.

    Arm-weighted sums are computed once, so evaluating the stacked score costs
    ``O(K^2)`` regardless of sample size. Per-subject terms use residuals
    centered at their sample mean. Their sum is the same score, and they are
    the influence-function contributions the sandwich variance needs.
    """

    def __init__(self, model, frame, weights=None):
        if frame.K != model.K:
            raise ValidationError(
                f"frame has {frame.K} time points, model expects {model.K}", field="schedule"
            )
        inc = frame.incomplete
        if inc.any():
            raise IncompleteRowError(
                f"{int(inc.sum())} subjects have missing adherence or outcome cells; "
                "impute them (multiple imputation) or drop them explicitly before "
                "computing the score"
            )
        self.model = model
        self.frame = frame
        self.weights = weights if weights is not None else WeightMatrix.identity(model.K)
        if self.weights.K != model.K:
            raise ValidationError("weight matrix size does not match the schedule", field="weights")
        self.W = self.weights.sigma_inverse

        R = frame.arm.astype(float)
        self.n = R.size
        self.d = R - R.mean()
        self.Y = frame.outcome
        self.X = frame.treated_adherence()
        self.P = frame.placebo_adherence() if model.mode is AdherenceMode.BOTH_ARMS else None

        d = self.d
        self.a = d @ self.Y
        self.w = d @ self.X
        self.c = d @ self.P if self.P is not None else None

    # -- identification ------------------------------------------------------

    def check_identification(self, atol=1e-12):
        """Raise when randomization does not move a parameter's score column."""
        scale = atol * max(self.n, 1)
        if np.all(np.abs(self.w) <= scale):
            raise WeakInstrumentError(
                "randomization is unrelated to treatment adherence at every time point; "
                "beta is not identified",
                parameter="beta",
            )
        if self.c is not None and np.all(np.abs(self.c) <= scale):
            raise WeakInstrumentError(
                "placebo adherence does not differ between arms; gamma is not identified",
                parameter="gamma",
            )

    # -- stacked score -------------------------------------------------------

    def total(self, theta):
        arr = self.model.check_theta(theta)
        M = self.model.decay_matrix(arr[1])
        inner = self.a - arr[0] * (M @ self.w)
        if self.c is not None:
            inner = inner - arr[2] * self.c
        return self.W @ inner

    def objective(self, theta):
        s = self.total(theta)
        return float(s @ s)

    def jacobian(self, theta):
        """``dS/dtheta`` of the stacked score, ``K x p`` on the natural scale."""
        arr = self.model.check_theta(theta)
        M = self.model.decay_matrix(arr[1])
        dM = self.model.decay_matrix_dalpha(arr[1])
        cols = [-(M @ self.w), -arr[0] * (dM @ self.w)]
        if self.c is not None:
            cols.append(-self.c)
        return self.W @ np.column_stack(cols)

    # -- per-subject pieces --------------------------------------------------

    def residuals(self, theta):
        """``n x K`` matrix of predicted adherence-free outcomes."""
        arr = self.model.check_theta(theta)
        M = self.model.decay_matrix(arr[1])
        r = self.Y - arr[0] * (self.X @ M.T)
        if self.P is not None:
            r = r - arr[2] * self.P
        return r

    def per_subject(self, theta):
        r = self.residuals(theta)
        rc = r - r.mean(axis=0)
        return self.d[:, None] * (rc @ self.W.T)

    def per_subject_jacobian(self, theta):
        """``n x K x p`` array of ``dS_i/dtheta``."""
        arr = self.model.check_theta(theta)
        M = self.model.decay_matrix(arr[1])
        dM = self.model.decay_matrix_dalpha(arr[1])
        parts = [-(self.X @ M.T), -arr[0] * (self.X @ dM.T)]
        if self.P is not None:
            parts.append(-self.P)
        out = np.empty((self.n, self.model.K, len(parts)))
        for p, dr in enumerate(parts):
            drc = dr - dr.mean(axis=0)
            out[:, :, p] = self.d[:, None] * (drc @ self.W.T)
        return out

    def evaluate(self, theta):
        return ScoreResult(total=self.total(theta), per_subject=self.per_subject(theta))


def score(model, theta, frame, weights=None):
    """Stacked G-estimation score ``S(theta)`` and its per-subject terms."""
    sf = ScoreFunction(model, frame, weights)
    sf.check_identification()
    return sf.evaluate(theta)


def wald_ratio(frame, k, adherence=None):
    """Simple IV estimate ``Cov(R, Y_k) / Cov(R, A_k)`` at 1-based time point ``k``.

    ``adherence`` substitutes another ``n x K`` adherence matrix, e.g. the
    treated-only adherence ``A * R``.
    """
    K = frame.K
    if not 1 <= k <= K:
        raise IndexError(f"k must lie in 1..{K}, got {k}")
    A = frame.adherence if adherence is None else np.asarray(adherence, dtype=float)
    a = A[:, k - 1]
    y = frame.outcome[:, k - 1]
    keep = ~(np.isnan(a) | np.isnan(y))
    R = frame.arm[keep].astype(float)
    a, y = a[keep], y[keep]
    Rc = R - R.mean()
    num = Rc @ (y - y.mean())
    den = Rc @ (a - a.mean())
    if abs(den) <= 1e-12 * max(R.size, 1):
        raise WeakInstrumentError(
            f"Cov(R, A_{k}) is zero: randomization does not predict adherence at time point {k}",
            parameter="beta",
        )
    return float(num / den)


def identification_check(model, frame, weights=None):
    ScoreFunction(model, frame, weights).check_identification()


__all__ = [
    "IdentificationError",
    "ScoreFunction",
    "ScoreResult",
    "SmmModel",
    "ThetaVector",
    "WeightMatrix",
    "effect_coefficient",
    "identification_check",
    "score",
    "subject_residual",
    "wald_ratio",
]
