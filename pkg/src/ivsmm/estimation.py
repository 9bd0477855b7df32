"""Point estimation: minimize ``S(theta)' S(theta)``.

A Nelder-Mead search gets close from a crude start, then Gauss-Newton steps on
the stacked score (analytic Jacobian) polish the answer. Alpha is searched on
the log scale, which keeps it positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import AdherenceMode
from .errors import ValidationError, WeakInstrumentError
from .smm import ScoreFunction, ThetaVector, wald_ratio

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 2000
    objective_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-8
    starting_theta: ThetaVector | None = None
    n_restarts: int = 3
    # hold alpha at this value instead of estimating it
    fixed_alpha: float | None = None

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ValidationError("max_iterations must be >= 1", field="max_iterations")
        if not self.objective_tolerance > 0:
            raise ValidationError("objective_tolerance must be > 0", field="objective_tolerance")
        if not self.parameter_tolerance > 0:
            raise ValidationError("parameter_tolerance must be > 0", field="parameter_tolerance")
        if int(self.n_restarts) < 0:
            raise ValidationError("n_restarts must be >= 0", field="n_restarts")
        if self.fixed_alpha is not None and not self.fixed_alpha > 0:
            raise ValidationError("fixed_alpha must be > 0", field="fixed_alpha")


@dataclass(frozen=True)
class FitResult:
    theta_hat: ThetaVector
    objective_at_optimum: float
    converged: bool
    iterations: int
    score_at_optimum: np.ndarray
    start_theta: ThetaVector = None
    start_objective: float = np.nan
    fixed: tuple = ()
    fallback: str | None = None
    restarts: int = 0
    candidates: tuple = field(default=(), repr=False)


def starting_values(sf, alpha=1.0):
    """Candidate starting points, best-objective first."""
    frame = sf.frame
    X = sf.X
    betas = []
    for k in sorted({1, frame.K}):
        try:
            betas.append(wald_ratio(frame, k, adherence=X))
        except WeakInstrumentError:
            continue
    if not betas:
        betas = [0.0]
    gamma = None
    if sf.model.mode is AdherenceMode.BOTH_ARMS:
        placebo = frame.arm == 0
        a1 = frame.adherence[placebo, 0]
        y1 = frame.outcome[placebo, 0]
        var = np.var(a1)
        # slope of Y_1 on A_1 in the placebo arm; for binary A this is the
        # adherent-minus-non-adherent mean difference
        gamma = 0.0 if var <= 1e-12 else float(np.cov(a1, y1, bias=True)[0, 1] / var)
        gamma = float(np.clip(gamma, -10.0, 10.0))
    cands = []
    for b in betas:
        b = float(np.clip(b, -1e6, 1e6))
        cands.append(ThetaVector(b, alpha, gamma))
    objs = [sf.objective(c) for c in cands]
    order = np.argsort(objs, kind="stable")
    return [cands[i] for i in order], [objs[i] for i in order]


def _to_internal(theta):
    arr = theta.as_array().copy()
    arr[1] = np.log(arr[1])
    return arr


def _to_theta(phi):
    arr = np.array(phi, dtype=float)
    arr[1] = np.exp(arr[1])
    return ThetaVector.from_array(arr)


class _Problem:
    def __init__(self, sf, free):
        self.sf = sf
        self.free = np.asarray(free, dtype=bool)

    def full(self, phi_free, phi_fixed):
        phi = phi_fixed.copy()
        phi[self.free] = phi_free
        return phi

    def score(self, phi):
        arr = np.array(phi, dtype=float)
        with np.errstate(over="raise", invalid="raise"):
            arr[1] = np.exp(arr[1])
            return self.sf.total(arr)

    def objective(self, phi):
        try:
            s = self.score(phi)
        except (FloatingPointError, ValidationError):
            return np.inf
        with np.errstate(over="ignore"):
            f = float(s @ s)
        return f if np.isfinite(f) else np.inf

    def jacobian(self, phi):
        arr = np.array(phi, dtype=float)
        arr[1] = np.exp(arr[1])
        J = self.sf.jacobian(arr)
        J[:, 1] *= arr[1]
        return J[:, self.free]


def _gauss_newton(prob, phi, budget, cfg):
    """Gauss-Newton on the stacked score. Returns (phi, obj, converged, iters, singular)."""
    f = prob.objective(phi)
    p = int(prob.free.sum())
    for it in range(1, budget + 1):
        s = prob.score(phi)
        J = prob.jacobian(phi)
        if not np.all(np.isfinite(J)) or np.linalg.matrix_rank(J) < p:
            return phi, f, False, it - 1, True
        step, *_ = np.linalg.lstsq(J, -s, rcond=None)
        full_step = np.zeros_like(phi)
        full_step[prob.free] = step
        t = 1.0
        for _ in range(40):
            cand = phi + t * full_step
            fc = prob.objective(cand)
            if fc <= f:
                break
            t *= 0.5
        else:
            # no descent along the Gauss-Newton direction: stationary to
            # working precision
            return phi, f, True, it, False
        dphi = cand - phi
        df = f - fc
        phi, f = cand, fc
        small_f = df <= cfg.objective_tolerance * max(1.0, f)
        small_x = np.all(np.abs(dphi) <= cfg.parameter_tolerance * (1.0 + np.abs(phi)))
        if small_f and small_x:
            return phi, f, True, it, False
    return phi, f, False, budget, False


def _optimize(sf, start, free, cfg):
    prob = _Problem(sf, free)
    phi0 = _to_internal(start)
    fixed_vals = phi0.copy()

    def fun(x):
        return prob.objective(prob.full(x, fixed_vals))

    f0 = fun(phi0[prob.free])
    nm = optimize.minimize(
        fun,
        phi0[prob.free],
        method="Nelder-Mead",
        options={
            "maxiter": int(cfg.max_iterations),
            "xatol": cfg.parameter_tolerance,
            "fatol": cfg.objective_tolerance * max(1.0, f0),
            "adaptive": prob.free.sum() > 2,
        },
    )
    nit = int(nm.nit)
    phi = prob.full(nm.x, fixed_vals)
    f = float(nm.fun)
    if f > f0:
        phi, f = phi0, f0
    budget = max(int(cfg.max_iterations) - nit, 1)
    phi_gn, f_gn, conv, gn_it, singular = _gauss_newton(prob, phi, budget, cfg)
    fallback = None
    if singular:
        fallback = "simplex-only"
        log.info("Gauss-Newton system singular; keeping the simplex solution")
        conv = bool(nm.success)
    elif f_gn <= f:
        phi, f = phi_gn, f_gn
    return phi, f, conv, nit + gn_it, fallback


def _perturbed_starts(theta, n, move_alpha=True):
    arr = theta.as_array()
    moves = [(0.5, -0.05, 0.5), (1.5, 0.05, 1.5), (1.0, -0.2, -1.0)]
    out = []
    for i in range(n):
        mb, la, mg = moves[i % len(moves)]
        scale = 1 + i // len(moves)
        b = arr[0] * mb if arr[0] != 0 else (mb - 1.0) * scale
        a = float(np.exp(np.log(arr[1]) + la * scale)) if move_alpha else float(arr[1])
        g = None
        if arr.size == 3:
            g = arr[2] * mg if arr[2] != 0 else (mg - 1.0) * scale
        out.append(ThetaVector(b, a, g))
    return out


def fit(model, frame, weights=None, config=None):
    """Estimate the structural mean model parameters on a complete frame."""
    cfg = config or FitConfig()
    sf = ScoreFunction(model, frame, weights)
    sf.check_identification()

    free = np.ones(model.n_params, dtype=bool)
    fixed = ()
    alpha0 = 1.0
    if cfg.fixed_alpha is not None:
        free[1] = False
        fixed = ("alpha",)
        alpha0 = float(cfg.fixed_alpha)
    elif model.K == 1:
        # with one time point there are no lagged effects, so alpha is not identified
        free[1] = False
        fixed = ("alpha",)

    if cfg.starting_theta is not None:
        start = ThetaVector.from_array(model.check_theta(cfg.starting_theta), model.mode)
        if fixed:
            start = ThetaVector(start.beta, alpha0, start.gamma)
        cands, objs = [start], [sf.objective(start)]
    else:
        cands, objs = starting_values(sf, alpha0)
    start, start_obj = cands[0], objs[0]

    phi, f, conv, iters, fallback = _optimize(sf, start, free, cfg)
    restarts = 0
    if not conv:
        best = (phi, f, conv, iters, fallback)
        for s in _perturbed_starts(start, cfg.n_restarts, move_alpha=bool(free[1])):
            restarts += 1
            res = _optimize(sf, s, free, cfg)
            cands.append(s)
            objs.append(sf.objective(s))
            if (res[2], -res[1]) > (best[2], -best[1]):
                best = res
            if res[2]:
                break
        phi, f, conv, iters, fallback = best

    theta = _to_theta(phi)
    if not conv:
        log.warning("fit did not converge after %d restarts (objective %.6g)", restarts, f)
    return FitResult(
        theta_hat=theta,
        objective_at_optimum=f,
        converged=bool(conv),
        iterations=int(iters),
        score_at_optimum=sf.total(theta),
        start_theta=start,
        start_objective=float(start_obj),
        fixed=fixed,
        fallback=fallback,
        restarts=restarts,
        candidates=tuple(zip(cands, objs)),
    )
