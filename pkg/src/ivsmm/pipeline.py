"""End-to-end analysis of one trial data set.

load -> (impute) -> (residualize) -> fit -> sandwich -> pool -> trajectories.
Imputation comes before residualization because the imputation subgroups are
defined by the raw binary adherence history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariates import residualize
from .data import AdherenceMode
from .errors import ValidationError
from .estimation import FitConfig, fit
from .imputation import ImputationConfig, impute
from .inference import CovarianceMatrix, mc_trajectories, parameter_table, rubin_pool, sandwich_variance
from .rng import DEFAULT_SEED
from .smm import SmmModel


@dataclass(frozen=True)
class AnalysisConfig:
    mode: AdherenceMode = AdherenceMode.BOTH_ARMS
    covariates: tuple = ()
    mi: int | None = None
    complete_case: bool = False
    draws: int = 10_000
    seed: int = DEFAULT_SEED
    chained_iterations: int = 10
    donors: int = 5
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", AdherenceMode.parse(self.mode))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.mi is not None and self.complete_case:
            raise ValidationError("choose either multiple imputation or complete-case", field="mi")
        if int(self.draws) < 2:
            raise ValidationError("draws must be >= 2", field="draws")


@dataclass(frozen=True)
class AnalysisResult:
    model: SmmModel
    theta: object
    covariance: CovarianceMatrix
    report: object
    fits: tuple
    covariances: tuple
    n_subjects: int
    n_dropped: int
    imputation: object = None

    @property
    def converged(self):
        return all(f.converged for f in self.fits)

    @property
    def m(self):
        return len(self.fits)

    def parameter_table(self):
        return parameter_table(self.theta, self.covariance)


def prepare_frames(frame, config, workers=1):
    """Frames to analyse: one complete frame, or ``m`` imputed ones."""
    if frame.is_complete:
        return [frame], 0, None
    n_bad = int(frame.incomplete.sum())
    if config.complete_case:
        return [frame.complete_cases()], n_bad, None
    if config.mi is None:
        raise ValidationError(
            f"{n_bad} subjects have missing cells; rerun with --mi M to impute "
            "or --complete-case to drop them",
            field="missing",
        )
    icfg = ImputationConfig(
        m=config.mi,
        chained_iterations=config.chained_iterations,
        donors=config.donors,
        seed=config.seed,
    )
    iset = impute(frame, config.covariates, icfg, workers=workers)
    return list(iset.completed_frames), 0, iset


def analyze(frame, config=None, workers=1):
    """Run the full estimation pipeline on a trial frame.

    ``workers`` only spreads the imputations over processes; results do not
    depend on it.

    Returns
    -------
    AnalysisResult
        Non-convergence is reported through ``converged`` rather than raised,
        so callers can still write what was computed.
    """
    config = config or AnalysisConfig()
    frames, n_dropped, iset = prepare_frames(frame, config, workers)
    model = SmmModel(config.mode, frame.schedule)
    fits, covs = [], []
    for f in frames:
        f = f.replace(mode=config.mode)
        if config.covariates:
            f = residualize(f, config.covariates)
        res = fit(model, f, config=config.fit)
        fits.append(res)
        covs.append(sandwich_variance(model, res.theta_hat, f, fixed=res.fixed))
    if len(fits) > 1:
        pooled = rubin_pool([(r.theta_hat, c) for r, c in zip(fits, covs)])
        theta, cov = pooled.theta, pooled.covariance
    else:
        theta, cov = fits[0].theta_hat, covs[0]
    report = mc_trajectories(model, theta, cov, draws=config.draws, seed=config.seed)
    return AnalysisResult(
        model=model,
        theta=theta,
        covariance=cov,
        report=report,
        fits=tuple(fits),
        covariances=tuple(covs),
        n_subjects=frame.n - n_dropped,
        n_dropped=n_dropped,
        imputation=iset,
    )


def mask_outcomes(frame, fraction, rng):
    """Set a random ``fraction`` of outcome cells to missing (MCAR)."""
    if not 0 <= fraction < 1:
        raise ValidationError("fraction must lie in [0, 1)", field="fraction")
    Y = np.array(frame.outcome, dtype=float)
    Y[rng.random(Y.shape) < fraction] = np.nan
    return frame.replace(outcome=Y)
