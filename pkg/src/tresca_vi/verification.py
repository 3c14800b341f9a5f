"""Executable checks of the qualitative and quantitative properties of the state
and control problems, each returning a signed margin (positive means pass)."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .control_opt import l2h_norm, optimize_control
from .functionals import (
    coercivity,
    convexity_gap,
    data_scale,
    energy_terms,
    norm_L2Gamma1_sq,
    norm_L2V_sq,
    norm_L2Vprime_sq,
    norm_LinfH,
)
from .mesh_fem import min_generalized_eig, operators
from .state_solver import (
    DIRICHLET,
    ROBIN,
    ControlField,
    ProblemSpec,
    StateTrajectory,
    combine,
    loads,
    solve_parabolic_vi,
)

MU_LIST = (0.25, 0.5, 0.75)


@dataclass
class CheckReport:
    name: str
    passed: bool
    margin: float
    details: dict = field(default_factory=dict)


@dataclass
class SweepReport:
    name: str
    parameter: str
    values: list
    errors: list
    slope: float
    monotone_decrease: bool
    passed: bool
    margin: float = 0.0
    details: dict = field(default_factory=dict)


def _report(name, margin, **details) -> CheckReport:
    margin = float(margin)
    return CheckReport(name, bool(margin >= 0), margin, details)


def slack(spec: ProblemSpec, *fields) -> float:
    """Additive slack 10 (dt + sqrt(eps)) * scale for discretized inequalities."""
    return 10.0 * (spec.dt + np.sqrt(spec.epsilon)) * data_scale(spec, *fields)


def _solve(spec, g) -> StateTrajectory:
    return solve_parabolic_vi(spec, g)[0]


def _order_tol(spec):
    return 10.0 * spec.newton_tol


def loglog_slope(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 3:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _dirichlet_twin(spec: ProblemSpec) -> ProblemSpec | None:
    g1 = spec.mesh.gamma1_nodes
    if not np.array_equal(spec.u_b[g1], spec.b[g1]):
        return None
    return spec.replace(bc_mode=DIRICHLET)


def check_positivity(spec: ProblemSpec, g: ControlField, seed=None) -> CheckReport:
    g2 = spec.mesh.gamma2_nodes
    if np.any(g.values < 0) or np.any(spec.b < 0) or np.any(spec.u_b < 0):
        raise ValueError("positivity check needs g >= 0, b >= 0 and u_b >= 0")
    if np.any(spec.q[g2] <= 0):
        raise ValueError("positivity check needs q > 0 on Gamma2")
    specs = [spec]
    if spec.bc_mode == DIRICHLET:
        specs.append(spec.replace(bc_mode=ROBIN))
    else:
        twin = _dirichlet_twin(spec)
        if twin is not None:
            specs.append(twin)
    mins = {s.bc_mode: float(_solve(s, g).values.min()) for s in specs}
    margin = min(mins.values()) + _order_tol(spec)
    return _report("positivity", margin, seed=seed, **{f"min_u_{k}": v for k, v in mins.items()})


def check_comparison_and_squeeze(spec: ProblemSpec, g1, g2, mu_list=MU_LIST, seed=None):
    """Order preservation between u_min(g1,g2), u_g1, u_g2, u_max(g1,g2) and the
    squeeze u_min <= u_4(mu) <= u_max."""
    lo = ControlField(np.minimum(g1.values, g2.values))
    hi = ControlField(np.maximum(g1.values, g2.values))
    u_lo, u_hi = _solve(spec, lo).values, _solve(spec, hi).values
    u1, u2 = _solve(spec, g1).values, _solve(spec, g2).values
    worst = {
        "lo_le_u1": (u1 - u_lo).min(),
        "lo_le_u2": (u2 - u_lo).min(),
        "u1_le_hi": (u_hi - u1).min(),
        "u2_le_hi": (u_hi - u2).min(),
    }
    if np.all(g1.values >= g2.values):
        worst["u2_le_u1"] = (u1 - u2).min()
    for mu in mu_list:
        u4 = _solve(spec, combine(mu, g1, g2)).values
        worst[f"squeeze_lo_mu{mu:g}"] = (u4 - u_lo).min()
        worst[f"squeeze_hi_mu{mu:g}"] = (u_hi - u4).min()
    worst = {k: float(v) for k, v in worst.items()}
    margin = min(worst.values()) + _order_tol(spec)
    return _report("comparison_squeeze", margin, seed=seed, **worst)


def monotony_tol(spec: ProblemSpec, *fields) -> float:
    return 100.0 * spec.newton_tol + 10.0 * np.sqrt(spec.epsilon) * data_scale(spec, *fields)


def check_monotony(spec: ProblemSpec, g1, g2, mu_list=MU_LIST, seed=None) -> CheckReport:
    """u_4(mu) <= u_3(mu) := mu u_g1 + (1 - mu) u_g2 at every node and level."""
    tol = monotony_tol(spec, g1, g2)
    u1, u2 = _solve(spec, g1).values, _solve(spec, g2).values
    gaps = {}
    for mu in mu_list:
        u4 = _solve(spec, combine(mu, g1, g2)).values
        gaps[f"min_u3_minus_u4_mu{mu:g}"] = float((mu * u1 + (1 - mu) * u2 - u4).min())
    margin = min(gaps.values()) + tol
    return _report("monotony", margin, seed=seed, tol_mono=tol, **gaps)


def check_lipschitz(spec: ProblemSpec, g1, g2, seed=None) -> CheckReport:
    """|U|^2_{Linf H} + lam |U|^2_{L2 V} <= (1/lam) |g1 - g2|^2_{L2 V'}, U = u1 - u2."""
    lam = coercivity(spec)
    ops = spec.ops
    U = _solve(spec, g1) - _solve(spec, g2)
    lhs = norm_LinfH(U, ops) ** 2 + lam * norm_L2V_sq(U, ops)
    rhs = norm_L2Vprime_sq(loads(spec, g1 - g2), ops, spec.dt) / lam
    s = slack(spec, g1, g2)
    return _report("lipschitz", 1.1 * rhs + s - lhs, seed=seed, lhs=lhs, rhs=rhs,
                   lam=lam, ratio=lhs / rhs if rhs > 0 else 0.0)


def check_energy_estimate(spec: ProblemSpec, g1, g2, mu, seed=None) -> CheckReport:
    u1, u2 = _solve(spec, g1), _solve(spec, g2)
    u4 = _solve(spec, combine(mu, g1, g2))
    e = energy_terms(u1, u2, u4, g1, g2, mu, spec)
    s = slack(spec, g1, g2)
    left = e.lhs_energy + mu * e.i14 + (1 - mu) * e.i24 + e.phi_gap
    right = mu * (1 - mu) * (e.alpha_total + e.beta_total)
    signs = min(e.alpha_total, e.beta_total, e.i14, e.i24, e.phi_gap)
    margin = min(1.1 * right + s - left, signs + s)
    return _report(
        "energy_estimate", margin, seed=seed, mu=mu, left=left, right=right,
        alpha=e.alpha_total, beta=e.beta_total, i14=e.i14, i24=e.i24,
        lhs_energy=e.lhs_energy, phi_gap=e.phi_gap, identity_residual=e.identity_residual,
    )


@lru_cache(maxsize=16)
def robin_lipschitz_constant(dim: int, n: int, c0: float, h2: float) -> dict:
    """Discrete |gamma0| / (lambda_1 min(1, h2)) with lambda_1 the coercivity of a_1."""
    ops = operators(dim, n, c0)
    G = ops.gram.toarray()
    B = ops.gamma1_mass.toarray()
    trace = float(np.sqrt(sla.eigh(B, G, eigvals_only=True)[-1]))
    lam1 = min_generalized_eig(ops.stiffness + ops.gamma1_mass, ops.gram)
    return {"trace_norm": trace, "lambda1": lam1, "constant": trace / (lam1 * min(1.0, h2))}


def _robin_subchecks(spec: ProblemSpec, g: ControlField, g2: ControlField, h2: float, h1: float):
    b = float(spec.b[0])
    # stuck friction nodes sit O(eps) off zero in the regularized problem
    tol = _order_tol(spec) + 10.0 * spec.epsilon * data_scale(spec, g, g2)
    s2, s1 = spec.replace(h=h2), spec.replace(h=h1)
    u_h1 = _solve(s1, g)
    u_h2 = _solve(s2, g)
    u_g2h2 = _solve(s2, g2)
    u_dir = _solve(spec.replace(bc_mode=DIRICHLET), g)
    out = {}
    out["i_bounds"] = min(u_h1.values.min(), (b - u_h1.values).min(),
                          u_h2.values.min(), (b - u_h2.values).min()) + tol
    out["ii_order"] = min(u_g2h2.values.min(), (u_h1.values - u_g2h2.values).min()) + tol
    out["iii_below_dirichlet"] = min((u_dir.values - u_h1.values).min(),
                                     (u_dir.values - u_h2.values).min()) + tol
    ops = spec.ops
    if h1 == h2:
        ratio, const = float("nan"), float("nan")
        out["iv_h_lipschitz"] = 0.0
    else:
        num = np.sqrt(norm_L2V_sq(u_h2 - u_h1, ops))
        trace = np.sqrt(norm_L2Gamma1_sq(StateTrajectory(b - u_h1.values, u_h1.dt), ops))
        den = (h1 - h2) * trace
        const = robin_lipschitz_constant(spec.dim, spec.n, float(spec.c0), float(h2))["constant"]
        ratio = num / den if den > 0 else 0.0
        out["iv_h_lipschitz"] = const - ratio
    return {k: float(v) for k, v in out.items()}, ratio, const


def check_robin_bounds(spec: ProblemSpec, g: ControlField, h_pair=None, g2=None,
                       seed=None) -> CheckReport:
    """Robin sub-checks: (i) 0 <= u_h <= b, (ii) 0 <= u_{g2,h2} <= u_{g,h1},
    (iii) u_h <= u_Dirichlet, (iv) h-Lipschitz ratio below the discrete constant.

    ``h_pair`` = (h2, h1) with 1 <= h2 <= h1; default (1, spec.h), retried at
    (10, max(spec.h, 100)) if a sub-check fails. ``g2 <= g`` defaults to g.
    """
    if spec.bc_mode != ROBIN:
        raise ValueError("check_robin_bounds needs a Robin spec")
    if np.any(g.values > 0):
        raise ValueError("check_robin_bounds needs g <= 0")
    g2 = g if g2 is None else g2
    if np.any(g2.values > g.values):
        raise ValueError("check_robin_bounds needs g2 <= g")
    if np.ptp(spec.b) != 0 or spec.b[0] <= 0 or not np.array_equal(spec.u_b, spec.b):
        raise ValueError("check_robin_bounds needs constant b > 0 and u_b = b")
    pairs = [h_pair] if h_pair is not None else [(1.0, max(spec.h, 1.0)),
                                                  (10.0, max(spec.h, 100.0))]
    for h2, h1 in pairs:
        if not 1.0 <= h2 <= h1:
            raise ValueError("need 1 <= h2 <= h1")
        sub, ratio, const = _robin_subchecks(spec, g, g2, h2, h1)
        margin = min(sub.values())
        if margin >= 0:
            break
    return _report("robin_bounds", margin, seed=seed, h2=h2, h1=h1, ratio=ratio,
                   constant=const, **sub)


def _floor(spec, *fields):
    return 1e3 * spec.newton_tol * data_scale(spec, *fields)


def _strictly_decreasing(errors):
    return bool(np.all(np.diff(errors) < 0))


def sweep_eps(spec: ProblemSpec, g: ControlField, eps_list=(1e-1, 1e-2, 1e-3, 1e-4)) -> SweepReport:
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3 or np.any(np.diff(eps_list) >= 0):
        raise ValueError("eps_list must be strictly decreasing with at least 3 values")
    ops = spec.ops
    ref = _solve(spec.replace(epsilon=min(eps_list) / 100), g)
    errors = [float(np.sqrt(norm_L2V_sq(_solve(spec.replace(epsilon=e), g) - ref, ops)))
              for e in eps_list]
    slope = loglog_slope(eps_list, errors)
    mono = _strictly_decreasing(errors)
    floor = _floor(spec, g)
    if max(errors) <= floor:
        # regularization inactive (e.g. q = 0): nothing to measure
        passed, margin = True, floor - max(errors)
    else:
        margin = slope - 0.4 if mono else -1.0
        passed = bool(mono and slope >= 0.4)
    return SweepReport("sweep_eps", "epsilon", eps_list, errors, slope, mono, passed,
                       float(margin), {"epsilon_ref": min(eps_list) / 100, "floor": floor})


def sweep_h(spec: ProblemSpec, g: ControlField, h_list=(1, 4, 16, 64, 256, 1024)) -> SweepReport:
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3 or np.any(np.diff(h_list) <= 0) or min(h_list) < 1:
        raise ValueError("h_list must be strictly increasing, >= 1, with at least 3 values")
    twin = _dirichlet_twin(spec)
    if twin is None:
        raise ValueError("sweep_h needs u_b = b on Gamma1")
    ops = spec.ops
    u_dir = _solve(twin, g)
    errors, traces = [], []
    for h in h_list:
        u = _solve(spec.replace(bc_mode=ROBIN, h=h), g)
        errors.append(float(np.sqrt(norm_L2V_sq(u - u_dir, ops))))
        traces.append(float(np.sqrt(norm_L2Gamma1_sq(u - u_dir, ops))))
    mono = _strictly_decreasing(errors)
    trace_slope = loglog_slope(h_list, traces)
    floor = _floor(spec, g)
    if max(errors) <= floor:
        passed, margin = True, floor - max(errors)
    else:
        margin = 0.05 * errors[0] - errors[-1] if mono else -errors[0]
        passed = bool(mono and errors[-1] <= 0.05 * errors[0])
    return SweepReport("sweep_h", "h", h_list, errors, loglog_slope(h_list, errors), mono,
                       passed, float(margin),
                       {"trace_errors": traces, "trace_slope": trace_slope, "floor": floor})


def _decreasing_with_exception(errors, allowance):
    bumps = np.diff(errors)
    bad = bumps >= 0
    return bool(bad.sum() == 0 or (bad.sum() == 1 and bumps[bad].max() <= allowance))


def control_convergence_study(spec_template: ProblemSpec, M_cost: float,
                              h_list=(1, 10, 100, 1000), grad_tol: float = 1e-6,
                              max_iter: int = 500) -> SweepReport:
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3 or np.any(np.diff(h_list) <= 0):
        raise ValueError("h_list must be strictly increasing with at least 3 values")
    twin = _dirichlet_twin(spec_template)
    if twin is None:
        raise ValueError("control study needs u_b = b on Gamma1")
    ops = spec_template.ops
    g_ref, u_ref, rep = optimize_control(twin, M_cost, None, grad_tol, max_iter)
    if not rep.converged:
        raise RuntimeError("optimizer did not converge for the Dirichlet problem")
    g_err, u_err, costs = [], [], []
    for h in h_list:
        s = spec_template.replace(bc_mode=ROBIN, h=h)
        g_h, u_h, rep_h = optimize_control(s, M_cost, None, grad_tol, max_iter)
        if not rep_h.converged:
            raise RuntimeError(f"optimizer did not converge for h={h:g}")
        g_err.append(l2h_norm(g_h - g_ref, twin))
        u_err.append(float(np.sqrt(norm_L2V_sq(u_h - u_ref, ops))))
        costs.append(rep_h.final_cost)
    floor = _floor(spec_template) + 10 * grad_tol
    ok_g = _decreasing_with_exception(g_err, 2 * grad_tol)
    ok_u = _decreasing_with_exception(u_err, 2 * grad_tol)
    if max(g_err) <= floor and max(u_err) <= floor:
        passed, margin = True, floor - max(max(g_err), max(u_err))
    else:
        margin = min(0.1 * g_err[0] - g_err[-1], 0.1 * u_err[0] - u_err[-1])
        if not (ok_g and ok_u):
            margin = min(margin, -1.0)
        passed = bool(margin >= 0)
    return SweepReport("control_convergence", "h", h_list, g_err,
                       loglog_slope(h_list, g_err), ok_g, passed, float(margin),
                       {"state_errors": u_err, "state_monotone": ok_u,
                        "state_slope": loglog_slope(h_list, u_err), "costs": costs,
                        "dirichlet_cost": rep.final_cost})


def check_convexity(spec: ProblemSpec, M_cost: float, n_random: int = 20, seed: int = 0,
                    mu_list=MU_LIST, h_robin=None) -> CheckReport:
    """Decomposition identity of the convexity gap and the strict-convexity modulus,
    over seeded nonnegative pairs, for the Dirichlet problem and one Robin h."""
    if n_random < 1:
        raise ValueError("n_random must be >= 1")
    rng = np.random.default_rng(seed)
    h = spec.h if h_robin is None else h_robin
    specs = [spec.replace(bc_mode=ROBIN, h=h)]
    twin = _dirichlet_twin(spec)
    if twin is not None:
        specs.insert(0, twin)
    worst_id, worst_mod = 0.0, np.inf
    failures = 0
    for s in specs:
        for _ in range(n_random):
            g1 = ControlField.random(s, rng)
            g2 = ControlField.random(s, rng)
            u1, u2 = _solve(s, g1), _solve(s, g2)
            for mu in mu_list:
                u4 = _solve(s, combine(mu, g1, g2))
                c = convexity_gap(g1, g2, mu, s, M_cost, states=(u1, u2, u4))
                mod = c.gap - c.g_diff_term * (1 - 1e-8)
                ok = c.identity_error <= 1e-10 and mod >= 0
                failures += not ok
                worst_id = max(worst_id, c.identity_error)
                worst_mod = min(worst_mod, mod)
    margin = min(1e-10 - worst_id, worst_mod)
    return _report("convexity", margin, seed=seed, n_random=n_random, failures=failures,
                   worst_identity_error=worst_id, worst_modulus_margin=float(worst_mod))


def check_gradient(spec: ProblemSpec, M_cost: float, g: ControlField, seed=None) -> CheckReport:
    """Relative L2(0,T;H) gap between adjoint and central-difference gradients."""
    from .control_opt import adjoint_gradient, fd_gradient

    a = adjoint_gradient(g, spec, M_cost)
    f = fd_gradient(g, spec, M_cost)
    ref = l2h_norm(f, spec)
    rel = l2h_norm(a - f, spec) / ref if ref > 0 else l2h_norm(a, spec)
    return _report("gradient", 1e-5 - rel, seed=seed, relative_error=rel, fd_norm=ref,
                   dim=g.values.size)


STATE_RESIDUAL_TOL = 1e-9


def check_state_residual(spec: ProblemSpec, g: ControlField, seed=None) -> CheckReport:
    """Re-evaluate the per-step equations on a computed trajectory.

    The bar is the fixed 1e-9 * scale rather than spec.newton_tol, so a loose
    solver tolerance shows up here.
    """
    system = spec.system
    f = loads(spec, g)
    U = _solve(spec, g).values
    worst = 0.0
    for n in range(1, spec.n_steps + 1):
        r = system.step_rhs(U[n - 1], f[n - 1])
        res = system.residual(U[n][system.free], r, spec.epsilon)
        worst = max(worst, float(np.max(np.abs(res))) if res.size else 0.0)
    bar = STATE_RESIDUAL_TOL * data_scale(spec, g)
    return _report("state_residual", bar - worst, seed=seed, max_residual=worst, bar=bar)
