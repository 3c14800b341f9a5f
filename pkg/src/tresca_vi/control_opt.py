"""Distributed optimal control of the regularized discrete state problem.

Gradients are Riesz representatives in the discrete L2(0,T;H) product
<a, b> = sum_n dt a_n' M b_n, so that g - s * grad is a steepest-descent step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .functionals import cost_J, l2h_inner
from .state_solver import ControlField, ProblemSpec, StateTrajectory, solve_parabolic_vi

log = logging.getLogger(__name__)

FD_MAX_DIM = 200


class LineSearchError(RuntimeError):
    pass


@dataclass
class OptimizeReport:
    iterations: int = 0
    final_cost: float = np.nan
    final_gradient_norm: float = np.nan
    cost_history: list = field(default_factory=list)
    line_search_backtracks: list = field(default_factory=list)
    converged: bool = False


def evaluate(g: ControlField, spec: ProblemSpec, M_cost: float):
    """(J(g), state) for the regularized discrete cost."""
    traj, _ = solve_parabolic_vi(spec, g)
    return cost_J(g, traj, M_cost, spec.ops), traj


def adjoint_term(g: ControlField, spec: ProblemSpec, traj: StateTrajectory | None = None):
    """Riesz representative of the state part of the gradient.

    Backward sweep J_n p^n = M u^n + M p^{n+1} / dt with p^{N+1} = 0, where J_n
    is the Newton Jacobian at u^n (symmetric, so no transpose is needed).
    """
    if traj is None:
        traj, _ = solve_parabolic_vi(spec, g)
    system = spec.system
    eps = spec.epsilon
    idx, c = system.fric_idx, system.fric_c
    mf = system.m_free
    P = np.zeros((spec.n_steps, spec.n_nodes))
    p_next = np.zeros(system.n_free)
    for n in range(spec.n_steps, 0, -1):
        x = traj.values[n][system.free]
        xs = x[idx]
        d = c * eps**2 / (eps * eps + xs * xs) ** 1.5
        p = system.solve(d, mf * x + mf * p_next / spec.dt)
        P[n - 1, system.free] = p
        p_next = p
    return ControlField(P)


def adjoint_gradient(g: ControlField, spec: ProblemSpec, M_cost: float,
                     traj: StateTrajectory | None = None) -> ControlField:
    g.check(spec)
    return ControlField(M_cost * g.values + adjoint_term(g, spec, traj).values)


def fd_gradient(g: ControlField, spec: ProblemSpec, M_cost: float, delta: float | None = None):
    """Central differences of J, divided by dt * M_kk to match adjoint_gradient."""
    g.check(spec)
    size = g.values.size
    if size > FD_MAX_DIM:
        raise ValueError(f"fd_gradient limited to {FD_MAX_DIM} control entries, got {size}")
    if delta is None:
        delta = 1e-4 * (1.0 + float(np.max(np.abs(g.values))))
    weight = spec.dt * spec.ops.mass_diag
    out = np.zeros_like(g.values)
    for k in range(size):
        n, i = np.unravel_index(k, g.values.shape)
        if weight[i] == 0:
            continue
        e = np.zeros_like(g.values)
        e[n, i] = delta
        jp, _ = evaluate(ControlField(g.values + e), spec, M_cost)
        jm, _ = evaluate(ControlField(g.values - e), spec, M_cost)
        out[n, i] = (jp - jm) / (2 * delta) / weight[i]
    return ControlField(out)


def l2h_norm(g: ControlField, spec: ProblemSpec) -> float:
    return float(np.sqrt(l2h_inner(g.values, g.values, spec.ops, spec.dt)))


def optimize_control(spec: ProblemSpec, M_cost: float, g0: ControlField | None = None,
                     grad_tol: float = 1e-6, max_iter: int = 500):
    """Gradient descent with Armijo backtracking and Barzilai-Borwein trial steps.

    Returns (g, state, OptimizeReport). Hitting ``max_iter`` is reported through
    ``report.converged``; a line search falling below step 1e-16 raises.
    """
    if not grad_tol > 0:
        raise ValueError("grad_tol must be positive")
    if not M_cost > 0:
        raise ValueError("M_cost must be positive")
    ops, dt = spec.ops, spec.dt
    g = ControlField.zeros(spec) if g0 is None else g0
    g.check(spec)
    J, traj = evaluate(g, spec, M_cost)
    grad = adjoint_gradient(g, spec, M_cost, traj)
    rep = OptimizeReport(cost_history=[J])
    step = 1.0 / max(M_cost, 1.0)
    it = 0
    while True:
        gnorm = np.sqrt(l2h_inner(grad.values, grad.values, ops, dt))
        if gnorm <= grad_tol:
            rep.converged = True
            break
        if it >= max_iter:
            log.warning("optimize_control stopped at max_iter=%d, |grad|=%.3e", max_iter, gnorm)
            break
        slope = -gnorm**2
        backtracks = 0
        while True:
            g_new = ControlField(g.values - step * grad.values)
            J_new, traj_new = evaluate(g_new, spec, M_cost)
            if J_new <= J + 1e-4 * step * slope and J_new < J:
                break
            step *= 0.5
            backtracks += 1
            if step < 1e-16:
                raise LineSearchError(
                    f"line search failed at iteration {it} (J={J:.6e}, |grad|={gnorm:.3e})"
                )
        grad_new = adjoint_gradient(g_new, spec, M_cost, traj_new)
        s = g_new.values - g.values
        y = grad_new.values - grad.values
        sy = l2h_inner(s, y, ops, dt)
        step = l2h_inner(s, s, ops, dt) / sy if sy > 0 else 1.0 / max(M_cost, 1.0)
        g, J, traj, grad = g_new, J_new, traj_new, grad_new
        rep.cost_history.append(J)
        rep.line_search_backtracks.append(backtracks)
        it += 1
    rep.iterations = it
    rep.final_cost = float(J)
    rep.final_gradient_norm = float(np.sqrt(l2h_inner(grad.values, grad.values, ops, dt)))
    return g, traj, rep
