"""Simulated longitudinal trials with confounded non-adherence.

Adherence follows arm-specific logit models driven by previous adherence,
previous outcome, time and an unobserved AR(1) confounder ``U``. The same
``U`` enters the outcome. Outcomes follow the decay model, plus an
instantaneous placebo effect under the E2 outcome model.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import AdherenceMode, TimeSchedule, TrialFrame
from .errors import SmmError, StudyWarning, ValidationError
from .estimation import FitConfig, fit
from .inference import sandwich_variance
from .parallel import pmap
from .rng import DEFAULT_SEED, substream
from .smm import PARAM_NAMES, SmmModel

log = logging.getLogger(__name__)

OUTCOME_MODELS = ("E1", "E2")
CONFOUNDER_INITS = ("stationary", "zero")


@dataclass(frozen=True)
class SimConfig:
    n: int = 1961
    K: int = 12
    # logit coefficients: intercept, previous A, previous Y, time index
    eta_0: float = 3.0
    eta_1: float = 0.2
    eta_2: float = -0.1
    eta_time: float = -0.2
    pi_0: float = 3.0
    pi_1: float = 0.3
    pi_2: float = -0.25
    pi_time: float = -0.2
    ar_coef: float = 0.98
    ar_sd: float = 0.2
    # "stationary": U_0 drawn from the AR(1) stationary law; "zero": U_0 = 0
    confounder_init: str = "stationary"
    beta: float = -1.1
    alpha: float = 0.95
    gamma: float = -0.9
    outcome_model: str = "E1"
    p_treat: float = 0.5
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValidationError(f"n must be an integer >= 2, got {self.n}", field="n")
        if int(self.K) != self.K or self.K < 1:
            raise ValidationError(f"K must be an integer >= 1, got {self.K}", field="K")
        if not -1 < self.ar_coef < 1:
            raise ValidationError(
                f"ar_coef must lie in (-1, 1), got {self.ar_coef}", field="ar_coef"
            )
        if not self.ar_sd >= 0:
            raise ValidationError(f"ar_sd must be >= 0, got {self.ar_sd}", field="ar_sd")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}", field="alpha")
        if not 0 < self.p_treat < 1:
            raise ValidationError(f"p_treat must lie in (0, 1), got {self.p_treat}", field="p_treat")
        if self.confounder_init not in CONFOUNDER_INITS:
            raise ValidationError(
                f"confounder_init must be one of {CONFOUNDER_INITS}, got {self.confounder_init!r}",
                field="confounder_init",
            )
        model = str(self.outcome_model).upper()
        if model not in OUTCOME_MODELS:
            raise ValidationError(
                f"outcome_model must be one of {OUTCOME_MODELS}, got {self.outcome_model!r}",
                field="outcome_model",
            )
        object.__setattr__(self, "outcome_model", model)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def schedule(self):
        return TimeSchedule.unit(self.K)

    @property
    def truth(self):
        if self.outcome_model == "E1":
            return (self.beta, self.alpha)
        return (self.beta, self.alpha, self.gamma)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def confounder_path(config, rng):
    """Draw the AR(1) confounder ``U`` for all subjects, shape ``(n, K)``."""
    cfg = config
    shocks = cfg.ar_sd * rng.standard_normal((cfg.n, cfg.K + 1))
    U = np.empty((cfg.n, cfg.K))
    if cfg.confounder_init == "stationary":
        u = shocks[:, 0] / np.sqrt(1.0 - cfg.ar_coef**2)
    else:
        u = np.zeros(cfg.n)
    for k in range(cfg.K):
        u = cfg.ar_coef * u + shocks[:, k + 1]
        U[:, k] = u
    return U


def simulate(config, rng=None):
    """Draw one trial from the data-generating process.

    Adherence is stored for both arms (the intended-injection indicator), so
    the frame can be analysed under either adherence definition.
    """
    cfg = config
    if rng is None:
        rng = substream(cfg.seed, "simulate")
    n, K = cfg.n, cfg.K
    t = cfg.schedule.as_array()
    R = (rng.random(n) < cfg.p_treat).astype(float)
    U = confounder_path(cfg, rng)
    treated = R == 1
    c0 = np.where(treated, cfg.eta_0, cfg.pi_0)
    c1 = np.where(treated, cfg.eta_1, cfg.pi_1)
    c2 = np.where(treated, cfg.eta_2, cfg.pi_2)
    ct = np.where(treated, cfg.eta_time, cfg.pi_time)

    A = np.zeros((n, K))
    Y = np.zeros((n, K))
    a_prev = np.zeros(n)
    y_prev = np.zeros(n)
    uniforms = rng.random((n, K))
    for k in range(K):
        # the time term is switched off at the first visit
        lin = c0 + c1 * a_prev + c2 * y_prev + (ct * (k + 1) if k > 0 else 0.0) + U[:, k]
        A[:, k] = (uniforms[:, k] < expit(lin)).astype(float)
        decay = cfg.alpha ** (t[k] - t[: k + 1])
        Y[:, k] = cfg.beta * (A[:, : k + 1] @ decay) * R + U[:, k]
        if cfg.outcome_model == "E2":
            Y[:, k] += cfg.gamma * A[:, k] * (1 - R)
        a_prev, y_prev = A[:, k], Y[:, k]
    return TrialFrame(
        arm=R,
        adherence=A,
        outcome=Y,
        schedule=cfg.schedule,
        covariates=pd.DataFrame(index=range(n)),
        mode=AdherenceMode.BOTH_ARMS,
    )


# -- Monte-Carlo study ------------------------------------------------------


@dataclass(frozen=True)
class ReplicationResult:
    index: int
    estimate: np.ndarray
    sandwich_se: np.ndarray
    converged: bool
    error: str | None = None


@dataclass(frozen=True)
class McStudyResult:
    names: tuple
    truth: tuple
    mean_estimate: np.ndarray
    empirical_se: np.ndarray
    mean_sandwich_se: np.ndarray
    replications: int
    n_used: int
    nonconverged: int
    failed: int
    estimates: np.ndarray
    sandwich_se: np.ndarray
    mode: AdherenceMode

    def to_table(self):
        """Appendix-style summary: rows are statistics, columns are parameters."""
        cols = ["beta", "alpha", "gamma"]
        data = {}
        for c in cols:
            if c in self.names:
                i = self.names.index(c)
                data[c] = [
                    self.truth[i],
                    self.mean_estimate[i],
                    self.empirical_se[i],
                    self.mean_sandwich_se[i],
                ]
            else:
                data[c] = [np.nan] * 4
        return pd.DataFrame(data, index=["Truth", "Estimate", "Empirical SE", "Sandwich SE"])

    def se_ratio(self):
        return self.mean_sandwich_se / self.empirical_se

    def rejection_rate(self, z=1.96):
        """Share of usable replications whose Wald test rejects the true value."""
        ok = self._usable()
        zstat = np.abs(self.estimates[ok] - np.asarray(self.truth)) / self.sandwich_se[ok]
        return (zstat > z).mean(axis=0)

    def _usable(self):
        return np.isfinite(self.sandwich_se).all(axis=1) & np.isfinite(self.estimates).all(axis=1)


def _replicate(index, config, mode, fit_config):
    frame = simulate(config, substream(config.seed, "replication", index))
    model = SmmModel(mode, frame.schedule)
    p = model.n_params
    nan = np.full(p, np.nan)
    try:
        res = fit(model, frame, config=fit_config)
    except SmmError as exc:
        return ReplicationResult(index, nan, nan, False, f"{type(exc).__name__}: {exc}")
    est = res.theta_hat.as_array()
    if not res.converged:
        return ReplicationResult(index, est, nan, False)
    try:
        cov = sandwich_variance(model, res.theta_hat, frame)
    except SmmError as exc:
        return ReplicationResult(index, est, nan, True, f"{type(exc).__name__}: {exc}")
    return ReplicationResult(index, est, cov.se, True)


def mc_study(config, replications, mode=None, fit_config=None, workers=1):
    """Repeat simulate -> fit -> sandwich and summarize the estimates.

    Non-convergent or failed replications are counted and left out of the
    moments. Replication ``r`` always uses the substream ``(seed, r)``.
    """
    replications = int(replications)
    if replications < 2:
        raise ValidationError("mc_study needs at least 2 replications", field="replications")
    if replications < 10:
        warnings.warn(
            f"only {replications} replications; summary moments will be very noisy",
            StudyWarning,
            stacklevel=2,
        )
    if mode is None:
        mode = AdherenceMode.TREATMENT_ONLY if config.outcome_model == "E1" else AdherenceMode.BOTH_ARMS
    mode = AdherenceMode.parse(mode)
    fit_config = fit_config or FitConfig()
    results = pmap(
        partial(_replicate, config=config, mode=mode, fit_config=fit_config),
        range(replications),
        workers=workers,
    )
    names = PARAM_NAMES[mode]
    est = np.vstack([r.estimate for r in results])
    se = np.vstack([r.sandwich_se for r in results])
    nonconv = sum(not r.converged and r.error is None for r in results)
    failed = sum(r.error is not None for r in results)
    ok = np.isfinite(est).all(axis=1) & np.isfinite(se).all(axis=1)
    n_used = int(ok.sum())
    if (nonconv + failed) > 0.05 * replications:
        warnings.warn(
            f"{nonconv} non-convergent and {failed} failed replications out of {replications}",
            StudyWarning,
            stacklevel=2,
        )
    for r in results:
        if r.error:
            log.info("replication %d failed: %s", r.index, r.error)
    if n_used >= 2:
        mean = est[ok].mean(axis=0)
        emp = est[ok].std(axis=0, ddof=1)
        sw = se[ok].mean(axis=0)
    else:
        mean = emp = sw = np.full(len(names), np.nan)
    truth = (config.beta, config.alpha) + ((config.gamma,) if len(names) == 3 else ())
    if mode is AdherenceMode.BOTH_ARMS and config.outcome_model == "E1":
        truth = (config.beta, config.alpha, 0.0)
    return McStudyResult(
        names=names,
        truth=truth,
        mean_estimate=mean,
        empirical_se=emp,
        mean_sandwich_se=sw,
        replications=replications,
        n_used=n_used,
        nonconverged=int(nonconv),
        failed=int(failed),
        estimates=est,
        sandwich_se=se,
        mode=mode,
    )
