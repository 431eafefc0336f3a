"""Projected limited-memory BFGS with Armijo backtracking.

Minimizes a smooth-enough objective over a feasible set given only a
value/gradient callback and a projection operator. Every accepted iterate
passes through the projection, and a step is accepted only if it strictly
decreases the objective, so the final value never exceeds the starting one.
"""

from dataclasses import dataclass

import numpy as np

__all__ = ["LbfgsResult", "minimize_lbfgs"]


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    value_evals: int
    grad_evals: int
    converged: bool      # gradient below tolerance (not just budget exhausted)


def _direction(grad, s_hist, y_hist, rho_hist):
    """Two-loop recursion; falls back to steepest descent with no history."""
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist),
                         reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist),
                              reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(value, grad, x0, project=None, max_iters=11, memory=10,
                   c1=1e-4, max_backtracks=25, tol_grad=1e-12,
                   first_step=None):
    """Minimize `value` starting from `x0`.

    value(x) -> float and grad(x) -> array are separate so cheap
    backtracking probes skip the gradient. `project` maps any point to the
    feasible set; x0 is projected before the first evaluation. `first_step`
    caps the norm of steepest-descent trial steps (taken before any
    curvature is known), saving backtracks when gradients dwarf the
    feasible region. Returns an LbfgsResult whose `fun` is
    <= value(project(x0)).
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    if project is not None:
        x = project(x)
    f = float(value(x))
    g = np.asarray(grad(x), dtype=float).ravel()
    n_val, n_grad = 1, 1
    s_hist, y_hist, rho_hist = [], [], []
    it = 0
    converged = False
    while it < max_iters:
        gnorm = np.linalg.norm(g)
        if gnorm <= tol_grad:
            converged = True
            break
        d = _direction(g, s_hist, y_hist, rho_hist)
        if g @ d >= 0.0:          # stale curvature; restart from gradient
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
        if not s_hist and first_step is not None:
            dnorm = np.linalg.norm(d)
            if dnorm > first_step:
                d *= first_step / dnorm
        alpha = 1.0
        x_new = f_new = None
        for _ in range(max_backtracks):
            cand = x + alpha * d
            if project is not None:
                cand = project(cand)
            f_cand = float(value(cand))
            n_val += 1
            step = cand - x
            slope = g @ step
            # sufficient decrease on the actual (projected) step; when the
            # projection bends the step uphill, demand a plain decrease
            if f_cand <= f + c1 * min(slope, 0.0) and f_cand < f:
                x_new, f_new = cand, f_cand
                break
            alpha *= 0.5
        if x_new is None:
            break                 # no improving step along this direction
        g_new = np.asarray(grad(x_new), dtype=float).ravel()
        n_grad += 1
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        it += 1
    return LbfgsResult(x=x, fun=f, iterations=it, value_evals=n_val,
                       grad_evals=n_grad, converged=converged)
