"""Scalar quantities on discrete trajectories: friction functional, space-time norms,
the tracking cost, and the terms of the convex-combination energy estimate."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mesh_fem import FemOperators, dual_norm_sq, min_generalized_eig, operators
from .state_solver import (
    ROBIN,
    ControlField,
    ProblemSpec,
    StateTrajectory,
    combine,
    loads,
    solve_parabolic_vi,
)


def phi(v, ops: FemOperators, q, epsilon: float = 0.0) -> float:
    """sum_{i in Gamma2} w_i q_i sqrt(eps^2 + v_i^2); eps = 0 gives the exact functional."""
    v = np.asarray(v, float)
    q = np.broadcast_to(np.asarray(q, float), v.shape)
    g2 = ops.mesh.gamma2_nodes
    w = ops.gamma2_weights[g2]
    return float(np.sum(w * q[g2] * np.sqrt(epsilon * epsilon + v[g2] ** 2)))


def _levels(x):
    """Rows that enter the right-endpoint time rule, plus the available dt."""
    if isinstance(x, StateTrajectory):
        return x.values[1:], x.dt
    if isinstance(x, ControlField):
        return x.values, None
    x = np.asarray(x, float)
    return x, None


def _dt(x, dt):
    _, own = _levels(x)
    dt = own if dt is None else dt
    if dt is None:
        raise ValueError("dt is required for control fields and raw arrays")
    return dt


def norm_L2H_sq(x, ops: FemOperators, dt=None) -> float:
    rows, _ = _levels(x)
    return _dt(x, dt) * float(np.sum(rows**2 * ops.mass_diag[None, :]))


def norm_L2V_sq(x, ops: FemOperators, dt=None) -> float:
    rows, _ = _levels(x)
    G = ops.gram
    return _dt(x, dt) * float(sum(r @ (G @ r) for r in rows))


def norm_LinfH(x, ops: FemOperators) -> float:
    rows = x.values if isinstance(x, (StateTrajectory, ControlField)) else np.asarray(x)
    return float(np.sqrt(np.max(np.sum(rows**2 * ops.mass_diag[None, :], axis=1))))


def norm_L2Gamma1_sq(x, ops: FemOperators, dt=None) -> float:
    rows, _ = _levels(x)
    return _dt(x, dt) * float(np.sum(rows**2 * ops.gamma1_diag[None, :]))


def norm_L2Vprime_sq(f_rows, ops: FemOperators, dt: float) -> float:
    """sum_n dt * f_n' G^-1 f_n for load vectors f_n (rows)."""
    return dt * float(sum(dual_norm_sq(f, ops) for f in np.asarray(f_rows, float)))


def l2h_inner(a, b, ops: FemOperators, dt: float) -> float:
    return dt * float(np.sum(a * b * ops.mass_diag[None, :]))


def cost_J(g: ControlField, traj: StateTrajectory, M_cost: float, ops: FemOperators | None = None) -> float:
    """1/2 ||u||^2_{L2(0,T;H)} + M/2 ||g||^2_{L2(0,T;H)}."""
    if ops is None:
        raise ValueError("ops is required")
    return 0.5 * norm_L2H_sq(traj, ops) + 0.5 * M_cost * norm_L2H_sq(g, ops, dt=traj.dt)


@lru_cache(maxsize=64)
def _coercivity(dim, n, c0, bc_mode, h):
    ops = operators(dim, n, c0)
    if bc_mode != ROBIN:
        return ops.lambda_estimate
    return min_generalized_eig(ops.stiffness + h * ops.gamma1_mass, ops.gram)


def coercivity(spec: ProblemSpec) -> float:
    """Lower estimate of the coercivity constant of a (Dirichlet) or a_h (Robin) on V."""
    h = float(spec.h) if spec.bc_mode == ROBIN else 0.0
    return _coercivity(spec.dim, spec.n, float(spec.c0), spec.bc_mode, h)


def data_scale(spec: ProblemSpec, *fields) -> float:
    vals = [1.0, np.max(np.abs(spec.b)), np.max(np.abs(spec.u_b)), np.max(np.abs(spec.q))]
    vals += [np.max(np.abs(f.values)) for f in fields]
    return float(max(vals))


@dataclass
class EnergyTerms:
    alpha_total: float
    beta_total: float
    i14: float
    i24: float
    lhs_energy: float
    phi_gap: float
    # not part of the continuous estimate; closes the discrete energy balance
    i43: float = 0.0
    dissipation: float = 0.0
    identity_residual: float = 0.0


def _bracket_terms(traj: StateTrajectory, g: ControlField, spec: ProblemSpec):
    """Per-level dual residual D^n = M (u^n - u^{n-1})/dt + A u^n - <g^n, .>."""
    system = spec.system
    U = traj.values
    m = spec.ops.mass_diag
    f = loads(spec, g)
    if spec.bc_mode == ROBIN:
        f = f + spec.h * spec.ops.gamma1_diag * spec.b
    AU = (system.form @ U[1:].T).T
    return m * (U[1:] - U[:-1]) / traj.dt + AU - f


def _vi_gap(D, uj, w, spec: ProblemSpec, dt):
    """sum_n dt [D^n.(w^n - u_j^n) + Phi(w^n) - Phi(u_j^n)] with exact Phi."""
    ops = spec.ops
    total = 0.0
    for n in range(D.shape[0]):
        a, b = uj[n + 1], w[n + 1]
        total += D[n] @ (b - a) + phi(b, ops, spec.q) - phi(a, ops, spec.q)
    return dt * float(total)


def energy_terms(u1, u2, u4, g1, g2, mu, spec: ProblemSpec, ops=None) -> EnergyTerms:
    trajs = (u1, u2, u4)
    if any(t.values.shape != u1.values.shape for t in trajs) or any(t.dt != u1.dt for t in trajs):
        raise ValueError("trajectories must share the space-time grid")
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    ops = spec.ops
    dt = u1.dt
    g3 = combine(mu, g1, g2)
    u3 = StateTrajectory(mu * u1.values + (1 - mu) * u2.values, dt)
    D1 = _bracket_terms(u1, g1, spec)
    D2 = _bracket_terms(u2, g2, spec)
    D4 = _bracket_terms(u4, g3, spec)
    alpha = _vi_gap(D1, u1.values, u2.values, spec, dt)
    beta = _vi_gap(D2, u2.values, u1.values, spec, dt)
    i14 = _vi_gap(D1, u1.values, u4.values, spec, dt)
    i24 = _vi_gap(D2, u2.values, u4.values, spec, dt)
    i43 = _vi_gap(D4, u4.values, u3.values, spec, dt)
    U = u4 - u3
    lam = ops.lambda_estimate
    lhs = 0.5 * norm_LinfH(U, ops) ** 2 + lam * norm_L2V_sq(U, ops)
    pg = dt * sum(
        mu * phi(a, ops, spec.q) + (1 - mu) * phi(b, ops, spec.q) - phi(c, ops, spec.q)
        for a, b, c in zip(u1.values[1:], u2.values[1:], u3.values[1:])
    )
    # exact discrete balance:
    # 1/2|U^N|^2 + 1/2 sum|dU|^2 + sum dt a(U,U) + mu I14 + (1-mu) I24 + phi_gap + I43
    #   = mu (1 - mu) (A + B)
    m = ops.mass_diag
    V = U.values
    dU = V[1:] - V[:-1]
    diss = 0.5 * float(np.sum(dU**2 * m)) + dt * float(
        sum(v @ (spec.system.form @ v) for v in V[1:])
    )
    left = 0.5 * float(V[-1] ** 2 @ m) + diss + mu * i14 + (1 - mu) * i24 + pg + i43
    right = mu * (1 - mu) * (alpha + beta)
    return EnergyTerms(alpha, beta, i14, i24, lhs, float(pg), i43, diss, left - right)


@dataclass
class ConvexityGap:
    gap: float
    state_term: float
    u_diff_term: float
    g_diff_term: float
    J1: float = 0.0
    J2: float = 0.0
    J4: float = 0.0

    @property
    def identity_error(self) -> float:
        """Relative defect of gap = state_term + u_diff_term + g_diff_term."""
        scale = max(abs(self.J1), abs(self.J2), abs(self.J4), 1e-300)
        return abs(self.gap - (self.state_term + self.u_diff_term + self.g_diff_term)) / scale


def convexity_gap(g1, g2, mu, spec: ProblemSpec, M_cost: float, states=None) -> ConvexityGap:
    """Split mu J(g1) + (1-mu) J(g2) - J(mu g1 + (1-mu) g2) into its three parts.

    ``states`` may pass precomputed (u1, u2, u4) trajectories.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    ops = spec.ops
    g3 = combine(mu, g1, g2)
    if states is None:
        u1 = solve_parabolic_vi(spec, g1)[0]
        u2 = solve_parabolic_vi(spec, g2)[0]
        u4 = solve_parabolic_vi(spec, g3)[0]
    else:
        u1, u2, u4 = states
    dt = spec.dt
    J1 = cost_J(g1, u1, M_cost, ops)
    J2 = cost_J(g2, u2, M_cost, ops)
    J4 = cost_J(g3, u4, M_cost, ops)
    u3 = StateTrajectory(mu * u1.values + (1 - mu) * u2.values, dt)
    gap = mu * J1 + (1 - mu) * J2 - J4
    state = 0.5 * (norm_L2H_sq(u3, ops) - norm_L2H_sq(u4, ops))
    udiff = 0.5 * mu * (1 - mu) * norm_L2H_sq(u1 - u2, ops)
    gdiff = 0.5 * M_cost * mu * (1 - mu) * norm_L2H_sq(g1 - g2, ops, dt=dt)
    return ConvexityGap(gap, state, udiff, gdiff, J1, J2, J4)
