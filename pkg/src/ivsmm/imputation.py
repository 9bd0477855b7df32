"""Chained-equation multiple imputation of outcomes by predictive mean matching.

Imputation runs separately in four subgroups defined by arm and by whether the
subject adhered at every visit. Only outcome cells are imputed; adherence must
be fully observed because it defines the subgroups.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import partial

import numpy as np

from .covariates import design_matrix
from .errors import ImputationWarning, ValidationError
from .parallel import pmap
from .rng import DEFAULT_SEED, substream

SUBGROUPS = ("T-full", "T-nonfull", "P-full", "P-nonfull")


@dataclass(frozen=True)
class ImputationConfig:
    m: int = 5
    chained_iterations: int = 10
    donors: int = 5
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise ValidationError(f"m must be an integer >= 2, got {self.m}", field="m")
        if int(self.chained_iterations) != self.chained_iterations or self.chained_iterations < 1:
            raise ValidationError(
                "chained_iterations must be an integer >= 1", field="chained_iterations"
            )
        if int(self.donors) != self.donors or self.donors < 1:
            raise ValidationError(f"donors must be an integer >= 1, got {self.donors}", field="donors")


@dataclass(frozen=True)
class ImputationSet:
    completed_frames: list
    subgroup_assignment: np.ndarray

    @property
    def m(self):
        return len(self.completed_frames)


def subgroups(frame):
    """Label each subject T-/P- by arm and full/nonfull by ``A_k = 1`` for all k."""
    A = frame.adherence
    if np.isnan(A).any():
        i, k = np.argwhere(np.isnan(A))[0]
        raise ValidationError(
            f"adherence must be fully observed for imputation; A_{k + 1} missing in row {i}",
            field=f"A_{k + 1}",
            row=int(i),
        )
    full = (A == 1).all(axis=1)
    arm = np.where(frame.arm == 1, "T", "P")
    return np.array([f"{a}-{'full' if f else 'nonfull'}" for a, f in zip(arm, full)], dtype=object)


def _draw_coefficients(X, y, rng):
    """OLS fit plus one draw from the approximate posterior of the coefficients.

    Returns ``(coef_hat, coef_draw)``.
    """
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    ok = s > s[0] * 1e-10
    U, s, Vt = U[:, ok], s[ok], Vt[ok]
    coef = Vt.T @ ((U.T @ y) / s)
    resid = y - X @ coef
    df = max(len(y) - ok.sum(), 1)
    sigma = np.sqrt(resid @ resid / rng.chisquare(df))
    draw = coef + sigma * (Vt.T @ (rng.standard_normal(ok.sum()) / s))
    return coef, draw


def _match(pred_donor, pred_target, donor_values, k, rng):
    """Copy the value of one of the ``k`` nearest donors, chosen at random."""
    nd = len(pred_donor)
    k = min(k, nd)
    # shuffle before the stable sort so tied predictions break at random
    order = rng.permutation(nd)
    order = order[np.argsort(pred_donor[order], kind="stable")]
    sorted_pred = pred_donor[order]
    # the k nearest neighbours of a point lie within k places of its
    # insertion position in the sorted donor predictions
    width = min(2 * k, nd)
    pos = np.searchsorted(sorted_pred, pred_target)
    start = np.clip(pos - k, 0, nd - width)
    window = start[:, None] + np.arange(width)[None, :]
    dist = np.abs(sorted_pred[window] - pred_target[:, None])
    nearest = np.take_along_axis(window, np.argsort(dist, axis=1, kind="stable")[:, :k], axis=1)
    pick = nearest[np.arange(len(pred_target)), rng.integers(0, k, size=len(pred_target))]
    return donor_values[order[pick]]


def _impute_once(q, frame, C, labels, config):
    rng = substream(config.seed, "impute", q)
    Y = frame.outcome.copy()
    miss = np.isnan(Y)
    n, K = Y.shape
    arm = frame.arm

    for g in SUBGROUPS:
        rows = labels == g
        for k in range(K):
            col_rows = rows & miss[:, k]
            if not col_rows.any():
                continue
            obs = rows & ~miss[:, k]
            if not obs.any():
                obs = (arm == arm[col_rows][0]) & ~miss[:, k]
            if not obs.any():
                raise ValidationError(
                    f"Y_{k + 1} has no observed values in the {g[0]} arm", field=f"Y_{k + 1}"
                )
            Y[col_rows, k] = frame.outcome[obs, k].mean()

    for _ in range(config.chained_iterations):
        for g in SUBGROUPS:
            rows = labels == g
            for k in range(K):
                target = rows & miss[:, k]
                if not target.any():
                    continue
                others = np.delete(np.arange(K), k)
                X = np.hstack([C, Y[:, others]])
                fit_rows = rows & ~miss[:, k]
                donors = fit_rows
                if fit_rows.sum() < X.shape[1] + 2:
                    whole = (arm == arm[target][0]) & ~miss[:, k]
                    fit_rows = whole
                    if not donors.any():
                        donors = whole
                coef, draw = _draw_coefficients(X[fit_rows], Y[fit_rows, k], rng)
                Y[target, k] = _match(
                    X[donors] @ coef, X[target] @ draw, Y[donors, k], config.donors, rng
                )
    return frame.replace(outcome=Y)


def impute(frame, covariates=(), config=None, workers=1):
    """Create ``m`` completed copies of ``frame`` by chained PMM.

    Parameters
    ----------
    frame : TrialFrame
        Adherence fully observed; outcome cells may be missing.
    covariates : sequence of str
        Baseline covariates added to every imputation model.
    config : ImputationConfig, optional
    workers : int
        Imputation ``q`` always draws from substream ``(seed, "impute", q)``,
        so the result does not depend on this.

    Returns
    -------
    ImputationSet
    """
    config = config or ImputationConfig()
    labels = subgroups(frame)
    if frame.is_complete:
        return ImputationSet([frame] * config.m, labels)
    C, _ = design_matrix(frame.covariates, list(covariates))
    miss = np.isnan(frame.outcome)
    n_pred = C.shape[1] + frame.K - 1
    for g in SUBGROUPS:
        rows = labels == g
        short = [
            k + 1
            for k in range(frame.K)
            if (rows & miss[:, k]).any() and (rows & ~miss[:, k]).sum() < n_pred + 2
        ]
        if short:
            warnings.warn(
                f"subgroup {g} is too small to fit its own imputation model for "
                f"Y_{short}; using donors and regression from the whole arm",
                ImputationWarning,
                stacklevel=2,
            )
    frames = pmap(
        partial(_impute_once, frame=frame, C=C, labels=labels, config=config),
        range(config.m),
        workers=workers,
    )
    return ImputationSet(list(frames), labels)
