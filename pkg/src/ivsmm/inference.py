"""Uncertainty for fitted structural mean models.

Sandwich covariance of the parameters, pooling across imputations, and
Monte-Carlo confidence bands for the implied outcome-contrast trajectories.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .data import AdherenceMode
from .errors import IdentificationError, NumericalError, ValidationError
from .rng import DEFAULT_SEED, substream
from .smm import PARAM_NAMES, ScoreFunction, ThetaVector

Z95 = 1.96
# MC draws are generated in fixed-size blocks, each with its own substream,
# so the result does not depend on how blocks are spread over workers.
DRAW_BLOCK = 1000

# null value each parameter is tested against
PARAM_NULLS = {"beta": 0.0, "alpha": 1.0, "gamma": 0.0}

CONTRAST_TREATMENT = "(a)"
CONTRAST_PLACEBO = "(b)"
CONTRAST_DIFFERENCE = "(a)-(b)"


@dataclass(frozen=True)
class CovarianceMatrix:
    matrix: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("covariance must be a square matrix", field="covariance")
        if not np.all(np.isfinite(m)):
            raise NumericalError("covariance has non-finite entries")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        names = tuple(self.names) or PARAM_NAMES.get(
            {2: AdherenceMode.TREATMENT_ONLY, 3: AdherenceMode.BOTH_ARMS}.get(m.shape[0]), ()
        )
        object.__setattr__(self, "names", tuple(names))

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))

    def is_psd(self, tol=1e-10):
        eig = np.linalg.eigvalsh(self.matrix)
        return bool(eig.min() >= -tol * max(1.0, np.abs(eig).max()))

    def as_frame(self):
        return pd.DataFrame(self.matrix, index=self.names, columns=self.names)


def sandwich_variance(model, theta_hat, frame, weights=None, cond_limit=1e12, fixed=()):
    """Robust covariance ``G_gen Var[S_i] G_gen' / n`` of the estimate.

    ``G`` is the mean per-subject Jacobian of the score, ``G_gen`` its
    left inverse ``(G'G)^-1 G'``, and ``Var[S_i]`` the sample covariance of
    the per-subject score terms, all evaluated at ``theta_hat``. Parameters
    named in ``fixed`` were held constant in the fit; they get zero rows and
    columns.
    """
    sf = ScoreFunction(model, frame, weights)
    theta = model.check_theta(theta_hat)
    names = model.param_names
    unknown = set(fixed) - set(names)
    if unknown:
        raise ValidationError(f"unknown fixed parameter(s) {sorted(unknown)}", field="fixed")
    free = np.array([name not in fixed for name in names])
    Si = sf.per_subject(theta)
    Gi = sf.per_subject_jacobian(theta)
    n = sf.n
    G = Gi.mean(axis=0)[:, free]
    V = np.cov(Si, rowvar=False, ddof=1).reshape(model.K, model.K)
    GtG = G.T @ G
    free_names = [nm for nm, f in zip(names, free) if f]
    eigval, eigvec = np.linalg.eigh(GtG)
    if eigval.max() <= 0 or eigval.min() <= eigval.max() / cond_limit:
        direction = eigvec[:, 0]
        worst = free_names[int(np.argmax(np.abs(direction)))]
        raise IdentificationError(
            f"mean score gradient is rank deficient (condition number > {cond_limit:g}); "
            f"the {worst} direction is not identified",
            parameter=worst,
        )
    G_gen = np.linalg.solve(GtG, G.T)
    cov = np.zeros((len(names), len(names)))
    cov[np.ix_(free, free)] = G_gen @ V @ G_gen.T / n
    return CovarianceMatrix(cov, names)


def analytic_gradient_check(model, theta, frame, weights=None, rel_step=1e-6):
    """Largest gap between analytic and central-difference ``dS_i/dtheta``."""
    sf = ScoreFunction(model, frame, weights)
    arr = model.check_theta(theta)
    analytic = sf.per_subject_jacobian(arr)
    numeric = np.empty_like(analytic)
    for p in range(arr.size):
        h = rel_step * max(1.0, abs(arr[p]))
        up, dn = arr.copy(), arr.copy()
        up[p] += h
        dn[p] -= h
        numeric[:, :, p] = (sf.per_subject(up) - sf.per_subject(dn)) / (2 * h)
    return float(np.max(np.abs(analytic - numeric)))


# -- pooling across imputations ---------------------------------------------


@dataclass(frozen=True)
class PooledEstimate:
    theta: ThetaVector
    covariance: CovarianceMatrix
    within: np.ndarray
    between: np.ndarray
    m: int


def rubin_pool(results):
    """Combine per-imputation ``(theta, covariance)`` pairs with Rubin's rules.

    The full matrices are pooled: ``T = W + (1 + 1/m) B`` with ``W`` the mean
    within-imputation covariance and ``B`` the sample covariance of the
    estimates.
    """
    results = list(results)
    m = len(results)
    if m < 2:
        raise ValidationError("Rubin pooling needs at least two imputations", field="m")
    thetas, covs = [], []
    for theta, cov in results:
        arr = theta.as_array() if isinstance(theta, ThetaVector) else np.asarray(theta, float)
        mat = cov.matrix if isinstance(cov, CovarianceMatrix) else np.asarray(cov, float)
        thetas.append(arr)
        covs.append(mat)
    sizes = {t.size for t in thetas} | {c.shape[0] for c in covs}
    if len(sizes) != 1:
        raise ValidationError(
            "imputation results have mismatched parameter lengths", field="theta"
        )
    thetas = np.vstack(thetas)
    mean = thetas.mean(axis=0)
    W = np.mean(np.stack(covs), axis=0)
    dev = thetas - mean
    B = dev.T @ dev / (m - 1)
    T = W + (1.0 + 1.0 / m) * B
    names = PARAM_NAMES[AdherenceMode.TREATMENT_ONLY if mean.size == 2 else AdherenceMode.BOTH_ARMS]
    return PooledEstimate(
        theta=ThetaVector.from_array(mean),
        covariance=CovarianceMatrix(T, names),
        within=W,
        between=B,
        m=m,
    )


# -- Wald tests ---------------------------------------------------------------


def wald_test(estimate, se, null=0.0):
    """Two-sided normal-approximation p-value for ``estimate`` against ``null``."""
    se = float(se)
    if se < 0 or np.isnan(se):
        raise ValidationError(f"standard error must be >= 0, got {se}", field="se")
    diff = float(estimate) - float(null)
    if se == 0:
        warnings.warn("degenerate zero standard error in Wald test", RuntimeWarning, stacklevel=2)
        return 0.0 if diff != 0 else 1.0
    return float(2.0 * stats.norm.sf(abs(diff) / se))


def parameter_table(theta, cov, z=Z95):
    rows = []
    arr = theta.as_array()
    for name, est, se in zip(theta.names, arr, cov.se):
        rows.append(
            {
                "parameter": name,
                "estimate": est,
                "se": se,
                "lower": est - z * se,
                "upper": est + z * se,
                "null": PARAM_NULLS[name],
                "p_value": wald_test(est, se, PARAM_NULLS[name]),
            }
        )
    return pd.DataFrame(rows)


# -- Monte-Carlo trajectories ----------------------------------------------


def _cumulative_effect(model, beta, alpha):
    """``beta * sum_{j<=k} alpha**(t_k - t_j)`` for each draw and time point."""
    lags = model.schedule.lags()
    lower = np.tril(np.ones_like(lags, dtype=bool))
    safe = np.where(lower, lags, 0.0)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    powers = np.power(alpha[:, None, None], safe[None, :, :]) * lower[None, :, :]
    return beta[:, None] * powers.sum(axis=2)


def plugin_trajectories(model, theta):
    """Outcome contrasts implied by ``theta`` at each time point."""
    arr = model.check_theta(theta)
    out = {CONTRAST_TREATMENT: _cumulative_effect(model, arr[0], arr[1])[0]}
    if model.mode is AdherenceMode.BOTH_ARMS:
        out[CONTRAST_PLACEBO] = np.full(model.K, arr[2])
        out[CONTRAST_DIFFERENCE] = out[CONTRAST_TREATMENT] - out[CONTRAST_PLACEBO]
    return out


def estimand_label(model):
    return CONTRAST_TREATMENT if model.mode is AdherenceMode.TREATMENT_ONLY else CONTRAST_DIFFERENCE


def mvn_factor(cov, tol=1e-6):
    """Square-root factor ``L`` with ``L L' = cov`` from a clipped eigen-decomposition."""
    m = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NumericalError("covariance has non-finite entries")
    m = 0.5 * (m + m.T)
    eigval, eigvec = np.linalg.eigh(m)
    scale = max(np.abs(eigval).max(), 0.0)
    if eigval.min() < -tol * max(scale, 1e-300) and eigval.min() < -1e-14:
        raise NumericalError(
            f"covariance is not positive semidefinite (smallest eigenvalue {eigval.min():.3g})"
        )
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def mvn_draws(mean, cov, n, seed=DEFAULT_SEED, tag="mvn"):
    mean = np.asarray(mean, dtype=float)
    L = mvn_factor(cov)
    out = np.empty((n, mean.size))
    for b, start in enumerate(range(0, n, DRAW_BLOCK)):
        size = min(DRAW_BLOCK, n - start)
        z = substream(seed, tag, b).standard_normal((size, mean.size))
        out[start : start + size] = mean + z @ L.T
    return out


@dataclass(frozen=True)
class EstimandReport:
    """Trajectory table plus the terminal hypothetical estimand."""

    trajectory: pd.DataFrame
    terminal_estimand: dict
    contrast_labels: tuple
    seed: int
    draws: int
    plugin: dict = field(repr=False, default_factory=dict)
    p_value_method: str = "two-sided normal-approximation Wald"

    def terminal_rows(self):
        """Final-time-point row of each contrast, Table-1 style."""
        last = self.trajectory[self.trajectory["k"] == self.trajectory["k"].max()]
        rows = []
        for _, r in last.iterrows():
            rows.append(
                {
                    "quantity": f"contrast {r['contrast']}",
                    "estimate": r["estimate"],
                    "se": r["se"],
                    "lower": r["lower"],
                    "upper": r["upper"],
                    "p_value": wald_test(r["estimate"], r["se"]),
                }
            )
        return rows


def mc_trajectories(model, theta, cov, draws=10_000, seed=DEFAULT_SEED, z=Z95):
    """Monte-Carlo trajectories of the outcome contrasts under full adherence.

    Draws parameter vectors from ``N(theta, cov)``, maps each to its implied
    trajectories, and summarizes each time point by the draw mean and SD with
    a ``mean +/- z*SD`` interval.
    """
    draws = int(draws)
    if draws < 2:
        raise ValidationError("need at least 2 Monte-Carlo draws", field="draws")
    arr = model.check_theta(theta)
    mat = cov.matrix if isinstance(cov, CovarianceMatrix) else np.asarray(cov, dtype=float)
    if mat.shape != (arr.size, arr.size):
        raise ValidationError("covariance size does not match theta", field="covariance")
    sample = mvn_draws(arr, mat, draws, seed=seed)
    if np.any(sample[:, 1] <= 0):
        raise NumericalError(
            "Monte-Carlo draws produced non-positive alpha; the covariance is too wide "
            "for the decay model"
        )
    plugin = plugin_trajectories(model, arr)
    traj = {CONTRAST_TREATMENT: _cumulative_effect(model, sample[:, 0], sample[:, 1])}
    if model.mode is AdherenceMode.BOTH_ARMS:
        traj[CONTRAST_PLACEBO] = np.repeat(sample[:, 2:3], model.K, axis=1)
        traj[CONTRAST_DIFFERENCE] = traj[CONTRAST_TREATMENT] - traj[CONTRAST_PLACEBO]

    rows = []
    times = model.schedule.times
    for label, values in traj.items():
        # centering on the plug-in keeps a degenerate covariance exactly degenerate
        dev = values - plugin[label]
        est = plugin[label] + dev.mean(axis=0)
        sd = dev.std(axis=0, ddof=1)
        for k in range(model.K):
            rows.append(
                {
                    "k": k + 1,
                    "time": times[k],
                    "contrast": label,
                    "estimate": est[k],
                    "se": sd[k],
                    "lower": est[k] - z * sd[k],
                    "upper": est[k] + z * sd[k],
                }
            )
    table = pd.DataFrame(rows)
    label = estimand_label(model)
    last = table[(table["contrast"] == label) & (table["k"] == model.K)].iloc[0]
    terminal = {
        "contrast": label,
        "estimate": float(last["estimate"]),
        "se": float(last["se"]),
        "lower": float(last["lower"]),
        "upper": float(last["upper"]),
        "p_value": wald_test(last["estimate"], last["se"]),
    }
    return EstimandReport(
        trajectory=table,
        terminal_estimand=terminal,
        contrast_labels=tuple(traj),
        seed=int(seed),
        draws=draws,
        plugin=plugin,
    )


# -- test of no causal effect ---------------------------------------------


def no_effect_test(model, frame, weights=None, alpha_ref=1.0, fit_config=None):
    """Wald tests of ``beta = 0`` (and ``gamma = 0``) with alpha held fixed.

    When ``beta = 0`` the decay parameter drops out of the model, so it is
    not identified and the full-model Wald test is non-regular. Fixing alpha
    at a reference value leaves a score that is linear in the remaining
    parameters, whose Wald statistics have their nominal null distribution.

    Returns
    -------
    DataFrame
        One row per tested parameter with estimate, se, z and p_value.
    """
    from .estimation import FitConfig, fit

    cfg = fit_config or FitConfig()
    cfg = dataclasses.replace(cfg, fixed_alpha=float(alpha_ref))
    res = fit(model, frame, weights, cfg)
    cov = sandwich_variance(model, res.theta_hat, frame, weights, fixed=("alpha",))
    rows = []
    for name, est, se in zip(model.param_names, res.theta_hat.as_array(), cov.se):
        if name == "alpha":
            continue
        rows.append(
            {
                "parameter": name,
                "estimate": est,
                "se": se,
                "z": est / se if se > 0 else np.nan,
                "p_value": wald_test(est, se, 0.0),
                "alpha_ref": float(alpha_ref),
            }
        )
    return pd.DataFrame(rows)
