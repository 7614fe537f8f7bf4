"""Levenberg-Marquardt minimizer for ``0.5 * ||r(x)||^2``.

The Jacobian may be dense (ndarray) or a scipy sparse matrix; the normal
equations are factorized with Cholesky (dense) or SuperLU (sparse).  Callers
whose parameters live on a manifold pass ``retract(x, dx)``; the Jacobian is
then the derivative of ``r(retract(x, dx))`` at ``dx = 0``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure

log = logging.getLogger(__name__)

# damping used for the undamped (Gauss-Newton) trial of each iteration
GN_DAMPING = 1e-12


@dataclass
class SolverOptions:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.3
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    cost_tolerance: float = 1e-14
    max_damping: float = 1e12
    gauss_newton_first: bool = True

    def __post_init__(self):
        positive = (
            self.max_iterations,
            self.initial_damping,
            self.gradient_tolerance,
            self.step_tolerance,
            self.cost_tolerance,
        )
        if any(v <= 0 for v in positive):
            raise ValueError("solver options must be positive")
        if not self.damping_up > 1.0 or not 0.0 < self.damping_down < 1.0:
            raise ValueError("need damping_up > 1 and 0 < damping_down < 1")


@dataclass
class LeastSquaresProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    n: int
    jacobian: Optional[Callable[[np.ndarray], object]] = None
    retract: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    m: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("parameter dimension must be >= 1")

    def plus(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        return x + dx if self.retract is None else self.retract(x, dx)

    def jac(self, x: np.ndarray):
        if self.jacobian is None:
            return numeric_jacobian(self, x)
        return self.jacobian(x)


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    reason: str
    initial_cost: float
    history: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        h = np.asarray(self.history)
        return bool(np.all(np.diff(h) <= 0.0))


def numeric_jacobian(p: LeastSquaresProblem, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``h * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(p.n):
        step = h * max(1.0, abs(x[i]))
        e = np.zeros(p.n)
        e[i] = step
        rp = np.asarray(p.residual(p.plus(x, e)), dtype=float)
        rm = np.asarray(p.residual(p.plus(x, -e)), dtype=float)
        cols.append((rp - rm) / (2.0 * step))
    return np.column_stack(cols)


def _solve(a, d, g, lam):
    """Solve (A + lam * diag(d)) dx = -g; returns None if the system is unusable."""
    try:
        if sp.issparse(a):
            m = (a + sp.diags(lam * d)).tocsc()
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                dx = spla.spsolve(m, -g, permc_spec="MMD_AT_PLUS_A")
        else:
            m = a + np.diag(lam * d)
            dx = scipy.linalg.cho_solve(scipy.linalg.cho_factor(m), -g)
    except (np.linalg.LinAlgError, spla.MatrixRankWarning, RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def lm_minimize(p: LeastSquaresProblem, x0, opts: Optional[SolverOptions] = None) -> LMResult:
    opts = opts or SolverOptions()
    x = np.array(x0, dtype=float)
    r = np.asarray(p.residual(x), dtype=float)
    if p.m is not None and r.shape != (p.m,):
        raise ValueError(f"residual has shape {r.shape}, expected ({p.m},)")
    cost = 0.5 * float(r @ r)
    initial = cost
    history = [cost]
    if cost == 0.0:
        return LMResult(x, cost, 0, "zero_residual", initial, history)

    lam = opts.initial_damping
    reason = "max_iterations"
    it = 0
    while it < opts.max_iterations:
        jac = p.jac(x)
        g = np.asarray(jac.T @ r).ravel()
        if np.max(np.abs(g)) <= opts.gradient_tolerance:
            reason = "gradient_tolerance"
            break
        a = (jac.T @ jac).tocsc() if sp.issparse(jac) else jac.T @ jac
        d = np.asarray(a.diagonal()).ravel().copy()
        d = np.maximum(d, 1e-12 * max(1.0, d.max()))

        trials = []
        if opts.gauss_newton_first:
            trials.append(GN_DAMPING)
        lam_t = lam
        accepted = False
        solved_any = False
        while True:
            if trials:
                lam_try = trials.pop()
                gn_trial = True
            else:
                if lam_t > opts.max_damping:
                    break
                lam_try = lam_t
                gn_trial = False
            dx = _solve(a, d, g, lam_try)
            if dx is not None:
                solved_any = True
                x_new = p.plus(x, dx)
                r_new = np.asarray(p.residual(x_new), dtype=float)
                new_cost = 0.5 * float(r_new @ r_new)
                if np.isfinite(new_cost) and new_cost < cost:
                    accepted = True
                    break
            if not gn_trial:
                lam_t *= opts.damping_up
        it += 1
        if not accepted:
            if not solved_any:
                raise NumericalFailure("normal equations unsolvable at every damping level")
            reason = "damping_limit"
            break

        lam = max((lam if gn_trial else lam_try) * opts.damping_down, 1e-15)
        decrease = cost - new_cost
        x, r, cost = x_new, r_new, new_cost
        history.append(cost)
        if cost == 0.0:
            reason = "zero_residual"
            break
        if np.linalg.norm(dx) <= opts.step_tolerance * (np.linalg.norm(x) + opts.step_tolerance):
            reason = "step_tolerance"
            break
        if decrease <= opts.cost_tolerance * cost:
            reason = "cost_tolerance"
            break
    log.debug("lm: %d iterations, cost %.3e -> %.3e (%s)", it, initial, cost, reason)
    return LMResult(x, cost, it, reason, initial, history)
