"""Backward-Euler solver for the parabolic variational inequality with Tresca friction.

Each time step solves the regularized nodal system

    S u + N_eps(u) = load + M_lumped prev / dt,
    N_eps(u)_i = w_i q_i u_i / sqrt(eps^2 + u_i^2)   (i on Gamma2),

where S = M_lumped/dt + stiffness (+ h * gamma1_mass for the Robin problem).
The Dirichlet problem eliminates the Gamma1 unknowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh_fem import ConvergenceError, FemOperators, operators, solve_spd

log = logging.getLogger(__name__)

# above this many unknowns the Newton systems go through CG instead of dense Cholesky
DENSE_LIMIT = 400

DIRICHLET = "dirichlet"
ROBIN = "robin"


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """All g-independent data of the state problem.

    ``q``, ``b`` and ``u_b`` accept scalars or full nodal arrays; scalars are
    broadcast. Only the Gamma2 entries of ``q`` and the Gamma1 entries of ``b``
    are used.
    """

    dim: int = 1
    n: int = 16
    c0: float = 1.0
    q: np.ndarray | float = 0.5
    b: np.ndarray | float = 1.0
    u_b: np.ndarray | float = 1.0
    T: float = 1.0
    n_steps: int = 32
    bc_mode: str = DIRICHLET
    h: float = 10.0
    epsilon: float = 1e-8
    newton_tol: float = 1e-11
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.bc_mode not in (DIRICHLET, ROBIN):
            raise ValueError(f"bc_mode must be '{DIRICHLET}' or '{ROBIN}', got {self.bc_mode!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.bc_mode == ROBIN and not self.h > 0:
            raise ValueError("h must be positive for the Robin problem")
        if self.c0 < 0:
            raise ValueError("c0 must be nonnegative")
        if self.c0 == 0 and self.bc_mode == ROBIN:
            raise ValueError("c0 = 0 is only allowed for the Dirichlet problem")
        nn = (self.n + 1) ** self.dim
        for name in ("q", "b", "u_b"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (nn,)).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.q[self.mesh.gamma2_nodes] < 0):
            raise ValueError("q must be nonnegative")
        if self.bc_mode == DIRICHLET:
            g1 = self.mesh.gamma1_nodes
            if not np.array_equal(self.u_b[g1], self.b[g1]):
                raise ValueError("u_b must equal b on Gamma1 for the Dirichlet problem")

    @property
    def ops(self) -> FemOperators:
        return operators(self.dim, self.n, float(self.c0))

    @property
    def mesh(self):
        return operators(self.dim, self.n, float(self.c0)).mesh

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** self.dim

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def replace(self, **changes) -> "ProblemSpec":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ProblemSpec(**kw)

    @cached_property
    def system(self) -> "StepSystem":
        return StepSystem(self)


@dataclass(frozen=True, eq=False)
class ControlField:
    values: np.ndarray  # (n_steps, n_nodes): g at t_1..t_N

    @classmethod
    def zeros(cls, spec: ProblemSpec) -> "ControlField":
        return cls(np.zeros((spec.n_steps, spec.n_nodes)))

    @classmethod
    def constant(cls, spec: ProblemSpec, c: float) -> "ControlField":
        return cls(np.full((spec.n_steps, spec.n_nodes), float(c)))

    @classmethod
    def random(cls, spec: ProblemSpec, rng: np.random.Generator, low=0.0, high=1.0):
        return cls(rng.uniform(low, high, size=(spec.n_steps, spec.n_nodes)))

    def check(self, spec: ProblemSpec):
        if self.values.shape != (spec.n_steps, spec.n_nodes):
            raise ValueError(
                f"control has shape {self.values.shape}, expected "
                f"{(spec.n_steps, spec.n_nodes)}"
            )

    def __add__(self, other):
        return ControlField(self.values + _vals(other))

    def __sub__(self, other):
        return ControlField(self.values - _vals(other))

    def __mul__(self, c):
        return ControlField(self.values * c)

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, (ControlField, StateTrajectory)) else x


def combine(mu: float, a: ControlField, b: ControlField) -> ControlField:
    """mu * a + (1 - mu) * b."""
    return ControlField(mu * a.values + (1.0 - mu) * b.values)


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    values: np.ndarray  # (n_steps + 1, n_nodes): u at t_0..t_N
    dt: float

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    def __sub__(self, other):
        return StateTrajectory(self.values - _vals(other), self.dt)


@dataclass
class SolveReport:
    newton_iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    epsilon: float = 0.0
    linear_solves: int = 0
    continuation_steps: list = field(default_factory=list)


class StepSystem:
    """Per-spec matrices restricted to the unknown (free) nodes."""

    def __init__(self, spec: ProblemSpec):
        ops = spec.ops
        mesh = ops.mesh
        nn = mesh.n_nodes
        self.dt = spec.dt
        m = ops.mass_diag
        A = ops.stiffness
        rhs_bc = np.zeros(nn)
        if spec.bc_mode == ROBIN:
            A = (A + spec.h * ops.gamma1_mass).tocsr()
            rhs_bc = spec.h * ops.gamma1_diag * spec.b
            free = np.arange(nn)
        else:
            free = np.setdiff1d(np.arange(nn), mesh.gamma1_nodes)
        # bilinear form of the problem (a or a_h) on all nodes
        self.form = A
        S_full = (A + sp.diags(m / spec.dt)).tocsr()
        self.free = free
        self.fixed = np.setdiff1d(np.arange(nn), free)
        self.S = S_full[free][:, free].tocsr()
        self.m = m
        self.m_free = m[free]
        self.fixed_values = spec.b[self.fixed]
        if self.fixed.size:
            rhs_bc = rhs_bc - S_full[:, self.fixed] @ self.fixed_values
        self.rhs_bc_free = rhs_bc[free]
        self.boundary_load = rhs_bc  # full-length, Dirichlet coupling included
        c = np.zeros(nn)
        g2 = mesh.gamma2_nodes
        c[g2] = ops.gamma2_weights[g2] * spec.q[g2]
        c_free = c[free]
        self.fric_idx = np.flatnonzero(c_free > 0)
        self.fric_c = c_free[self.fric_idx]
        self.n_free = free.size
        self.S_dense = self.S.toarray() if self.n_free <= DENSE_LIMIT else None

    def full(self, x_free: np.ndarray) -> np.ndarray:
        u = np.empty(self.free.size + self.fixed.size)
        u[self.free] = x_free
        u[self.fixed] = self.fixed_values
        return u

    def step_rhs(self, prev: np.ndarray, load: np.ndarray) -> np.ndarray:
        return load[self.free] + self.m_free * prev[self.free] / self.dt + self.rhs_bc_free

    def residual(self, x, r, eps):
        res = self.S @ x - r
        xs = x[self.fric_idx]
        res[self.fric_idx] += self.fric_c * xs / np.sqrt(eps * eps + xs * xs)
        return res

    def solve(self, d, rhs):
        """Solve (S + diag(d)) y = rhs; d is given on the friction nodes only."""
        if self.S_dense is not None:
            A = self.S_dense.copy()
            A[self.fric_idx, self.fric_idx] += d
            return sla.cho_solve(sla.cho_factor(A, check_finite=False), rhs, check_finite=False)
        full = np.zeros(self.n_free)
        full[self.fric_idx] = d
        return solve_spd((self.S + sp.diags(full)).tocsr(), rhs, 1e-14)

    def jacobian(self, x, eps):
        d = np.zeros(self.n_free)
        xs = x[self.fric_idx]
        d[self.fric_idx] = self.fric_c * eps**2 / (eps * eps + xs * xs) ** 1.5
        return (self.S + sp.diags(d)).tocsr()


def _newton(system: StepSystem, x0, r, eps, tol, max_iter, stats):
    """Primal-dual Newton for one regularized step at fixed eps.

    The dual variable lam = x / sqrt(eps^2 + x^2) on friction nodes is carried
    alongside x and clipped to [-1, 1]; at lam consistent with x the linear
    system is the Jacobian S + diag(c eps^2 / (eps^2 + x^2)^1.5).
    Returns (x, converged, residual history).
    """
    idx, c, S = system.fric_idx, system.fric_c, system.S
    x = np.array(x0, dtype=float)
    lam = x[idx] / np.sqrt(eps * eps + x[idx] ** 2)
    hist = []
    for it in range(max_iter + 1):
        res = system.residual(x, r, eps)
        rn = float(np.max(np.abs(res))) if res.size else 0.0
        hist.append(rn)
        if rn <= tol:
            stats["newton"] = stats.get("newton", 0) + it
            return x, True, hist
        if it == max_iter:
            break
        xs = x[idx]
        s = np.sqrt(eps * eps + xs * xs)
        r1 = S @ x - r
        r1[idx] += c * lam
        r2 = s * lam - xs
        d = c * (1.0 - lam * xs / s) / s
        rhs = -r1
        rhs[idx] += c * r2 / s
        dx = system.solve(d, rhs)
        stats["solves"] = stats.get("solves", 0) + 1
        dlam = (-r2 + (1.0 - lam * xs / s) * dx[idx]) / s
        x = x + dx
        lam = np.clip(lam + dlam, -1.0, 1.0)
    stats["newton"] = stats.get("newton", 0) + max_iter
    return x, False, hist


def solve_timestep(prev, load, spec: ProblemSpec, ops: Optional[FemOperators] = None,
                   report: Optional[SolveReport] = None, step: Optional[int] = None):
    """One implicit step. ``load`` is the nodal load vector M_lumped g^n.

    Boundary data (h * gamma1_mass * b for Robin, elimination of Gamma1 for
    Dirichlet) is added here. Returns the full nodal vector u^n.
    """
    system = spec.system
    r = system.step_rhs(np.asarray(prev, float), np.asarray(load, float))
    x0 = np.asarray(prev, float)[system.free]
    stats = {}
    if system.fric_idx.size == 0:
        x = system.solve(np.zeros(0), r)
        res = system.residual(x, r, spec.epsilon)
        rn = float(np.max(np.abs(res))) if res.size else 0.0
        hist = [rn]
        if rn > spec.newton_tol:
            # one correction pass for badly scaled right-hand sides
            x = x - system.solve(np.zeros(0), res)
            rn = float(np.max(np.abs(system.residual(x, r, spec.epsilon))))
            hist.append(rn)
        if rn > spec.newton_tol:
            raise ConvergenceError(
                f"linear step {step} residual {rn:.3e} > {spec.newton_tol:g}",
                residual=rn, history=hist, step=step,
            )
        _record(report, 0, rn, stats)
        return system.full(x)

    x, ok, hist = _newton(system, x0, r, spec.epsilon, spec.newton_tol,
                          spec.newton_max_iter, stats)
    ladder = []
    if not ok:
        # eps-continuation from the previous level, 1e-1, 1e-2, ... down to eps
        x = x0
        k = 1
        while True:
            eps_k = max(spec.epsilon, 10.0 ** (-k))
            x, ok, h_k = _newton(system, x, r, eps_k, spec.newton_tol,
                                 spec.newton_max_iter, stats)
            hist.extend(h_k)
            ladder.append(eps_k)
            if eps_k == spec.epsilon:
                break
            k += 1
        if not ok:
            raise ConvergenceError(
                f"Newton failed at step {step} after eps-continuation "
                f"(residual {hist[-1]:.3e})",
                residual=hist[-1], history=hist, step=step,
            )
        log.debug("step %s needed eps-continuation %s", step, ladder)
    _record(report, stats.get("newton", 0), hist[-1], stats, ladder)
    return system.full(x)


def _record(report, iters, res, stats, ladder=()):
    if report is None:
        return
    report.newton_iterations.append(int(iters))
    report.residuals.append(float(res))
    report.linear_solves += int(stats.get("solves", 0))
    if ladder:
        report.continuation_steps.append(list(ladder))


def loads(spec: ProblemSpec, g: ControlField) -> np.ndarray:
    """Nodal load vectors M_lumped g^n, shape (n_steps, n_nodes)."""
    return g.values * spec.ops.mass_diag[None, :]


def solve_parabolic_vi(spec: ProblemSpec, g: ControlField):
    """March the regularized VI from u_b; returns (StateTrajectory, SolveReport)."""
    g.check(spec)
    report = SolveReport(epsilon=spec.epsilon)
    f = loads(spec, g)
    U = np.empty((spec.n_steps + 1, spec.n_nodes))
    U[0] = spec.u_b
    for k in range(1, spec.n_steps + 1):
        U[k] = solve_timestep(U[k - 1], f[k - 1], spec, report=report, step=k)
    return StateTrajectory(U, spec.dt), report


def step_energy(v, prev, load, spec: ProblemSpec, eps: float = 0.0) -> float:
    """1/2 v'Sv + Phi_eps(v) - (rhs)'v on the free unknowns (constant terms dropped)."""
    system = spec.system
    r = system.step_rhs(np.asarray(prev, float), np.asarray(load, float))
    x = np.asarray(v, float)[system.free]
    xs = x[system.fric_idx]
    phi = float(np.sum(system.fric_c * np.sqrt(eps * eps + xs * xs)))
    return 0.5 * float(x @ (system.S @ x)) + phi - float(r @ x)


def oracle_minimize_timestep(prev, load, spec: ProblemSpec, ops=None,
                             max_sweeps: int = 200_000) -> np.ndarray:
    """Exact (eps = 0) implicit step by cyclic coordinate descent.

    Each coordinate update minimizes the per-step energy exactly; friction
    coordinates use soft thresholding. Stops once a full sweep lowers the
    energy by at most 1e-14. Desk-scale only (at most 50 unknowns).
    """
    system = spec.system
    if system.n_free > 50:
        raise ValueError(f"oracle limited to 50 unknowns, got {system.n_free}")
    S = system.S.toarray()
    r = system.step_rhs(np.asarray(prev, float), np.asarray(load, float))
    c = np.zeros(system.n_free)
    c[system.fric_idx] = system.fric_c
    diag = np.diag(S).copy()
    x = np.zeros(system.n_free)

    def energy(x):
        return 0.5 * x @ S @ x + np.sum(c * np.abs(x)) - r @ x

    e_old = energy(x)
    for _ in range(max_sweeps):
        for i in range(system.n_free):
            z = r[i] - (S[i] @ x - diag[i] * x[i])
            x[i] = np.sign(z) * max(abs(z) - c[i], 0.0) / diag[i]
        e = energy(x)
        if e_old - e <= 1e-14:
            break
        e_old = e
    return system.full(x)
