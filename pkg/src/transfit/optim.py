"""Maximizer for smooth objectives under linear inequality constraints.

The constraints are A theta >= 0 (one row per constraint).  A logarithmic
barrier mu * sum(log(A theta)) is added to the objective and mu is driven
to zero geometrically.  Each barrier subproblem is solved by a
quasi-Newton ascent: a BFGS estimate of the raw objective's negative
Hessian is maintained (and survives across subproblems), while the
barrier's own Hessian is available in closed form and rebuilt at every
iterate.  This keeps the step well-scaled even when constraints are
nearly active and the barrier is extremely stiff.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import LineSearchError, MaxIterationsError

__all__ = ["ConstrainedProblem", "barrier_maximize"]

MU_INITIAL = 1e-2
MU_FACTOR = 0.2
MU_MIN = 1e-8
MAX_INNER_ITER = 300
BACKTRACK_RATIO = 0.5
ARMIJO_SLOPE = 1e-4
MAX_BACKTRACKS = 60


@dataclass
class ConstrainedProblem:
    """Objective (returning value and gradient), constraint rows, start.

    The start must satisfy A theta > 0 strictly; a start with slack in
    [-1e-9, 0] is nudged into the interior via a minimum-norm correction.
    ``value_only``, when given, must return the same value as objective
    but may skip the gradient work (used inside line searches).
    """

    objective: Callable[[np.ndarray], tuple]
    constraints: np.ndarray  # shape (m, dim); empty (0, dim) means unconstrained
    start: np.ndarray
    value_only: Optional[Callable[[np.ndarray], float]] = None


def _strictly_feasible_start(a: np.ndarray, theta: np.ndarray) -> np.ndarray:
    if a.shape[0] == 0:
        return theta
    slack = a @ theta
    if np.all(slack > 0):
        return theta
    scale = max(1.0, float(np.max(np.abs(theta))))
    if np.min(slack) < -1e-9 * scale:
        raise ValueError(f"start violates constraints (min slack {np.min(slack):.3e})")
    # zero/near-zero slacks: push each up to a tiny positive target with the
    # minimum-norm correction, keeping the point essentially unchanged
    target = np.maximum(slack, 1e-6 * scale)
    correction, *_ = np.linalg.lstsq(a, target - slack, rcond=None)
    theta = theta + correction
    if np.any(a @ theta <= 0):
        raise ValueError("could not repair start into the strict interior")
    return theta


def _aug_value(problem, theta, mu):
    """Barrier-augmented objective value; -inf outside the feasible set."""
    a = problem.constraints
    barrier = 0.0
    if a.shape[0]:
        slack = a @ theta
        if np.any(slack <= 0):
            return -np.inf
        if mu > 0:
            barrier = mu * float(np.sum(np.log(slack)))
    value = problem.value_only(theta) if problem.value_only else problem.objective(theta)[0]
    if not np.isfinite(value):
        return -np.inf
    return value + barrier


def _eval_raw(problem, theta):
    """Raw objective value/gradient plus slack; None gradient if infeasible
    or non-finite."""
    a = problem.constraints
    slack = None
    if a.shape[0]:
        slack = a @ theta
        if np.any(slack <= 0):
            return -np.inf, None, None
    value, grad_obj = problem.objective(theta)
    if not np.isfinite(value):
        return -np.inf, None, slack
    return value, grad_obj, slack


def _augment(value_obj, grad_obj, slack, a, mu):
    """Add the barrier term to a raw evaluation."""
    if slack is None or mu <= 0:
        return value_obj, grad_obj
    value = value_obj + mu * float(np.sum(np.log(slack)))
    grad = grad_obj + mu * (a.T @ (1.0 / slack))
    return value, grad


def _line_search(problem, theta, value, direction, slope, mu):
    """Backtracking with one quadratic interpolation; returns the accepted
    point, or None if no step improves the objective."""
    step = 1.0
    for it in range(MAX_BACKTRACKS):
        cand = theta + step * direction
        cand_value = _aug_value(problem, cand, mu)
        if cand_value >= value + ARMIJO_SLOPE * step * slope:
            return cand
        if it == 0 and np.isfinite(cand_value):
            denom = 2.0 * (cand_value - value - slope * step)
            if denom < 0:
                trial = -slope * step * step / denom
                step = min(max(trial, 0.1 * step), BACKTRACK_RATIO * step)
                continue
        step *= BACKTRACK_RATIO
    return None


class _QuasiNewton:
    """BFGS estimate of the raw objective's negative Hessian (kept positive
    definite), combined per-iterate with the analytic barrier Hessian."""

    def __init__(self, dim: int, w: np.ndarray | None = None):
        self.dim = dim
        self.w = np.eye(dim) if w is None else w

    def direction(self, a, slack, mu, grad):
        h = self.w
        if slack is not None and mu > 0:
            h = h + (a.T * (mu / (slack * slack))) @ a
        try:
            d = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            d = np.linalg.solve(h + 1e-8 * np.eye(self.dim), grad)
        return d

    def update(self, s, y_obj):
        # ascent on a concave patch gives s.(grad_new - grad_old) < 0, so
        # (s, -y_obj) is a standard positive-curvature BFGS pair
        yhat = -y_obj
        sy = float(s @ yhat)
        if sy <= 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yhat)):
            return
        ws = self.w @ s
        sws = float(s @ ws)
        if sws <= 0:
            return
        self.w = self.w - np.outer(ws, ws) / sws + np.outer(yhat, yhat) / sy

    def repair(self):
        """Restore symmetry and positive definiteness lost to rounding in
        badly conditioned rank-one updates."""
        w = 0.5 * (self.w + self.w.T)
        eigvals, eigvecs = np.linalg.eigh(w)
        floor = max(1e-10 * float(eigvals[-1]), 1e-8)
        eigvals = np.maximum(eigvals, floor)
        self.w = (eigvecs * eigvals) @ eigvecs.T


def _stage(problem, theta, mu, tol, max_iter, qn, entry):
    """Maximize the barrier objective at fixed mu from a feasible start.

    ``entry`` is the raw evaluation (value_obj, grad_obj, slack) at theta,
    reused across stage boundaries where only mu changes.  Near-active
    constraints make the barrier extremely stiff; once improvements drop
    to rounding level the stage is accepted as converged even if the
    gradient criterion is out of numerical reach.
    """
    a = problem.constraints
    value_obj, grad_obj, slack = entry
    if grad_obj is None:
        raise ValueError("infeasible or non-finite objective at stage start")
    value, grad = _augment(value_obj, grad_obj, slack, a, mu)
    stalled = 0
    for it in range(max_iter):
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol * max(1.0, abs(value)):
            return theta, (value_obj, grad_obj, slack)
        direction = qn.direction(a, slack, mu, grad)
        slope = float(direction @ grad)
        if slope <= 0:
            qn.repair()  # curvature matrix lost positive definiteness
            direction = qn.direction(a, slack, mu, grad)
            slope = float(direction @ grad)
            if slope <= 0:
                direction, slope = grad, float(grad @ grad)
        cand = _line_search(problem, theta, value, direction, slope, mu)
        if cand is None and direction is not grad:
            cand = _line_search(problem, theta, value, grad, float(grad @ grad), mu)
        if cand is None:
            if it == 0 and gnorm >= 1e-3 * max(1.0, abs(value)):
                raise LineSearchError(
                    f"objective not improvable from the start at mu={mu:g} "
                    f"(|grad|={gnorm:.3e})"
                )
            # no direction improves the objective at machine precision:
            # stationary for this stage
            return theta, (value_obj, grad_obj, slack)
        cand_value_obj, cand_grad_obj, cand_slack = _eval_raw(problem, cand)
        if cand_grad_obj is None:
            return theta, (value_obj, grad_obj, slack)
        cand_value, cand_grad = _augment(cand_value_obj, cand_grad_obj, cand_slack, a, mu)
        s = cand - theta
        qn.update(s, cand_grad_obj - grad_obj)
        improvement = cand_value - value
        theta, value, grad = cand, cand_value, cand_grad
        value_obj, grad_obj, slack = cand_value_obj, cand_grad_obj, cand_slack
        # objective improvements at rounding level, or steps at machine
        # precision, mean the stage optimum is resolved as finely as doubles
        # allow (typical when a huge quadratic penalty dominates curvature)
        step_size = float(np.max(np.abs(s)))
        if (improvement <= 64.0 * np.finfo(float).eps * max(1.0, abs(value))
                or step_size <= 1e-14 * (1.0 + float(np.max(np.abs(theta))))):
            stalled += 1
            if stalled >= 3:
                return theta, (value_obj, grad_obj, slack)
        else:
            stalled = 0
    raise MaxIterationsError(
        f"quasi-Newton did not converge in {max_iter} iterations at mu={mu:g}", best=theta
    )


def barrier_maximize(problem: ConstrainedProblem, tol: float = 1e-7,
                     state: dict | None = None):
    """Maximize the objective subject to A theta >= 0.

    Runs the geometric barrier schedule (mu from 1e-2 down by factor 0.2
    until below 1e-8) and returns the final iterate; the objective at the
    result is never below its value at the start.  A caller-owned
    ``state`` dict carries the learned curvature matrix across related
    maximizations (successive M-steps of one EM run), which cuts the
    iteration count several-fold.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = np.asarray(problem.constraints, dtype=float)
    if a.ndim != 2:
        raise ValueError("constraints must be a 2-d array")
    problem = ConstrainedProblem(problem.objective, a,
                                 np.asarray(problem.start, dtype=float),
                                 problem.value_only)
    theta = _strictly_feasible_start(a, problem.start.copy())
    dim = theta.size
    w0 = state.get("w_matrix") if state else None
    if w0 is not None and w0.shape != (dim, dim):
        w0 = None
    qn = _QuasiNewton(dim, w0)

    entry = _eval_raw(problem, theta)
    if a.shape[0] == 0:
        theta, entry = _stage(problem, theta, 0.0, tol, MAX_INNER_ITER, qn, entry)
    else:
        mu = MU_INITIAL
        while mu >= MU_MIN:
            theta, entry = _stage(problem, theta, mu, tol, MAX_INNER_ITER, qn, entry)
            mu *= MU_FACTOR
    if state is not None:
        state["w_matrix"] = qn.w
    return theta
