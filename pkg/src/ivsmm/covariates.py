"""Partial baseline covariates out of outcomes and adherence.

Each ``Y_k`` is replaced by its residual from an OLS fit on the covariates
(all subjects pooled) and each ``A_k`` by its residual from an OLS fit within
its own arm. Missing cells are skipped when fitting and stay missing. The
randomization indicator is never touched, so ``R - mean(R)`` in the score is
computed on the original arm.

Adherence residuals keep their arm mean: ``A_k - (C - mean_arm(C)) b_arm``.
Centering adherence within each arm would remove the between-arm contrast in
adherence, which is the only thing the instrument identifies the effect from.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import TrialFrame
from .errors import CollinearityWarning, ValidationError

_RANK_TOL = 1e-10


@dataclass(frozen=True)
class ResidualizationRecord:
    """Provenance of the fitted regressions.

    ``outcome_coef`` is ``K x p`` and ``adherence_coef`` maps arm -> ``K x p``,
    both over the design columns in ``columns`` (intercept first).
    """

    covariates: tuple
    columns: tuple
    dropped: tuple
    outcome_coef: np.ndarray
    adherence_coef: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ResidualizedFrame(TrialFrame):
    provenance: ResidualizationRecord = None

    _binary_adherence = False

    def replace(self, **changes):
        changes.setdefault("provenance", self.provenance)
        fields = dict(
            arm=self.arm,
            adherence=self.adherence,
            outcome=self.outcome,
            schedule=self.schedule,
            covariates=self.covariates,
            ids=self.ids,
            mode=self.mode,
        )
        fields.update(changes)
        return type(self)(**fields)


def design_matrix(covariates, names):
    """Intercept plus covariates; categorical columns are one-hot coded.

    Non-numeric columns get one indicator per level except the first
    (sorted) level, which is the reference.

    Returns
    -------
    X : ndarray, shape (n, p)
    columns : list of str
    """
    n = len(covariates)
    blocks = [np.ones((n, 1))]
    columns = ["(intercept)"]
    for name in names:
        if name not in covariates.columns:
            raise ValidationError(f"covariate {name!r} not found", field=name)
        col = covariates[name]
        if col.isna().any():
            row = int(np.flatnonzero(col.isna().to_numpy())[0])
            raise ValidationError(
                f"covariate {name!r} is missing in row {row}", field=name, row=row
            )
        if pd.api.types.is_numeric_dtype(col) and not pd.api.types.is_bool_dtype(col):
            blocks.append(col.to_numpy(dtype=float)[:, None])
            columns.append(str(name))
            continue
        levels = sorted(col.astype(str).unique())
        for level in levels[1:]:
            blocks.append((col.astype(str) == level).to_numpy(dtype=float)[:, None])
            columns.append(f"{name}[{level}]")
    return np.hstack(blocks), columns


def _independent_columns(X, tol=_RANK_TOL):
    """Greedy left-to-right selection of linearly independent columns."""
    keep = []
    Q = np.zeros((X.shape[0], 0))
    for j in range(X.shape[1]):
        x = X[:, j]
        r = x - Q @ (Q.T @ x)
        if np.linalg.norm(r) > tol * max(1.0, np.linalg.norm(x)):
            keep.append(j)
            Q = np.hstack([Q, (r / np.linalg.norm(r))[:, None]])
    return keep


def _residualize_column(y, X, rows):
    """OLS residuals of ``y`` on ``X`` over ``rows`` with observed ``y``."""
    out = y.copy()
    coef = np.full(X.shape[1], np.nan)
    use = rows & ~np.isnan(y)
    if not use.any():
        return out, coef
    # minimum-norm lstsq: the projection is well-defined even when a subset
    # of rows leaves the design rank-deficient
    coef, *_ = np.linalg.lstsq(X[use], y[use], rcond=None)
    out[use] = y[use] - X[use] @ coef
    return out, coef


def residualize(frame, covariate_names=()):
    """Replace outcomes and adherence by their covariate-regression residuals.

    Parameters
    ----------
    frame : TrialFrame
    covariate_names : sequence of str
        Baseline covariates to partial out. An empty sequence regresses on
        the intercept alone: outcomes are centred and adherence is unchanged.

    Returns
    -------
    ResidualizedFrame
    """
    names = list(covariate_names)
    X, columns = design_matrix(frame.covariates, names)
    keep = _independent_columns(X)
    dropped = tuple(c for j, c in enumerate(columns) if j not in keep)
    if dropped:
        warnings.warn(
            f"dropping collinear covariate columns: {', '.join(dropped)}",
            CollinearityWarning,
            stacklevel=2,
        )
    X = X[:, keep]
    columns = tuple(columns[j] for j in keep)

    n, K = frame.n, frame.K
    every = np.ones(n, dtype=bool)
    Y = np.empty((n, K))
    A = np.empty((n, K))
    y_coef = np.empty((K, X.shape[1]))
    a_coef = {arm: np.empty((K, X.shape[1])) for arm in (0, 1)}
    for k in range(K):
        Y[:, k], y_coef[k] = _residualize_column(frame.outcome[:, k], X, every)
        col = frame.adherence[:, k].copy()
        for arm in (0, 1):
            rows = frame.arm == arm
            res, a_coef[arm][k] = _residualize_column(frame.adherence[:, k], X, rows)
            obs = rows & ~np.isnan(res)
            if obs.any():
                col[obs] = res[obs] + frame.adherence[obs, k].mean()
        A[:, k] = col

    record = ResidualizationRecord(
        covariates=tuple(names),
        columns=columns,
        dropped=dropped,
        outcome_coef=y_coef,
        adherence_coef=a_coef,
    )
    return ResidualizedFrame(
        arm=frame.arm,
        adherence=A,
        outcome=Y,
        schedule=frame.schedule,
        covariates=frame.covariates,
        ids=frame.ids,
        mode=frame.mode,
        provenance=record,
    )
