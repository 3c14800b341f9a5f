import numpy as np
import pytest
from hypothesis import given, strategies as st

from tresca_vi.functionals import (
    convexity_gap,
    cost_J,
    energy_terms,
    norm_L2H_sq,
    norm_L2V_sq,
    norm_L2Vprime_sq,
    norm_LinfH,
    phi,
)
from tresca_vi.mesh_fem import dual_norm_sq, operators
from tresca_vi.state_solver import (
    ControlField,
    ProblemSpec,
    StateTrajectory,
    combine,
    solve_parabolic_vi,
)

FRICTION = dict(b=0.0, u_b=0.0, q=0.2)


def solve(spec, g):
    return solve_parabolic_vi(spec, g)[0]


def test_phi_examples():
    ops = operators(1, 4, 1.0)
    assert phi(np.zeros(5), ops, 0.5) == 0.0
    assert phi(np.zeros(5), ops, 0.5, 1e-3) == pytest.approx(1e-3 * 0.5)
    v = np.zeros(5)
    v[-1] = -3.0
    assert phi(v, ops, 2.0) == 6.0


@given(v=st.lists(st.floats(-1e3, 1e3), min_size=25, max_size=25),
       q=st.floats(0, 10), eps=st.floats(0, 1))
def test_phi_regularization_bound(v, q, eps):
    ops = operators(2, 4, 1.0)
    v = np.array(v)
    gap = phi(v, ops, q, eps) - phi(v, ops, q)
    total = eps * q * ops.gamma2_weights.sum()
    assert -1e-9 <= gap <= total + 1e-9 * (1 + abs(phi(v, ops, q)))


def test_norms_zero_and_constant():
    ops = operators(1, 4, 1.0)
    zero = StateTrajectory(np.zeros((5, 5)), 0.25)
    for f in (norm_L2H_sq, norm_L2V_sq):
        assert f(zero, ops) == 0.0
    assert norm_LinfH(zero, ops) == 0.0
    assert norm_L2Vprime_sq(np.zeros((4, 5)), ops, 0.25) == 0.0
    const = StateTrajectory(np.full((5, 5), 2.0), 0.25)  # u'Mu = 4 on |Omega| = 1
    assert norm_L2H_sq(const, ops) == pytest.approx(4.0)
    assert norm_LinfH(const, ops) == pytest.approx(2.0)


def test_norms_against_resummation(rng):
    ops = operators(2, 3, 1.0)
    dt = 0.2
    U = rng.standard_normal((4, 16))
    traj = StateTrajectory(U, dt)
    M = np.diag(ops.mass_diag)
    G = ops.stiffness_pure.toarray() + M
    h = v = w = 0.0
    for k in range(1, 4):
        h += dt * U[k] @ M @ U[k]
        v += dt * U[k] @ G @ U[k]
        w += dt * U[k] @ np.linalg.solve(G, U[k])
    assert norm_L2H_sq(traj, ops) == pytest.approx(h, rel=1e-12)
    assert norm_L2V_sq(traj, ops) == pytest.approx(v, rel=1e-12)
    assert norm_L2Vprime_sq(U[1:], ops, dt) == pytest.approx(w, rel=1e-10)
    sup = max(np.sqrt(U[k] @ M @ U[k]) for k in range(4))
    assert norm_LinfH(traj, ops) == pytest.approx(sup, rel=1e-12)


def test_linf_includes_initial_level():
    ops = operators(1, 2, 1.0)
    U = np.zeros((3, 3))
    U[0] = 5.0
    assert norm_LinfH(StateTrajectory(U, 0.5), ops) == pytest.approx(5.0)
    assert norm_L2H_sq(StateTrajectory(U, 0.5), ops) == 0.0


def test_cost_examples(rng):
    spec = ProblemSpec(n=8, n_steps=4, b=0.0, u_b=0.0)
    ops = spec.ops
    g0 = ControlField.zeros(spec)
    assert cost_J(g0, solve(spec, g0), 1.0, ops) == 0.0
    zero_state = StateTrajectory(np.zeros((5, 9)), spec.dt)
    g = ControlField.constant(spec, np.sqrt(2.0))  # ||g||^2 = 2 on (0,1) x (0,1)
    assert cost_J(g, zero_state, 3.0, ops) == pytest.approx(3.0)
    g = ControlField.random(spec, rng, -1, 1)
    traj = solve(spec, g)
    m = ops.mass_diag
    ref = 0.5 * sum(spec.dt * np.dot(u * m, u) for u in traj.values[1:])
    ref += 0.35 * sum(spec.dt * np.dot(x * m, x) for x in g.values)
    assert cost_J(g, traj, 0.7, ops) == pytest.approx(ref, rel=1e-12)


@given(seed=st.integers(0, 2**32 - 1), mu=st.floats(0, 1))
def test_convex_combination_norm_identity(seed, mu):
    rng = np.random.default_rng(seed)
    ops = operators(1, 8, 1.0)
    u1 = StateTrajectory(rng.standard_normal((6, 9)), 0.1)
    u2 = StateTrajectory(rng.standard_normal((6, 9)), 0.1)
    u3 = StateTrajectory(mu * u1.values + (1 - mu) * u2.values, 0.1)
    lhs = norm_L2H_sq(u3, ops)
    rhs = (mu * norm_L2H_sq(u1, ops) + (1 - mu) * norm_L2H_sq(u2, ops)
           - mu * (1 - mu) * norm_L2H_sq(u1 - u2, ops))
    scale = norm_L2H_sq(u1, ops) + norm_L2H_sq(u2, ops)
    assert abs(lhs - rhs) <= 1e-12 * scale


def _states(spec, g1, g2, mu):
    return solve(spec, g1), solve(spec, g2), solve(spec, combine(mu, g1, g2))


@pytest.mark.parametrize("mode", ["dirichlet", "robin"])
def test_energy_terms_degenerate_cases(mode, rng):
    spec = ProblemSpec(n=8, n_steps=16, bc_mode=mode, **FRICTION)
    g = ControlField.random(spec, rng)
    u = solve(spec, g)
    e = energy_terms(u, u, u, g, g, 0.5, spec)
    for v in (e.alpha_total, e.beta_total, e.i14, e.i24, e.lhs_energy, e.phi_gap):
        assert abs(v) <= 1e-12
    g2 = ControlField.random(spec, rng)
    u1, u2, u4 = _states(spec, g, g2, 0.0)
    e = energy_terms(u1, u2, u4, g, g2, 0.0, spec)
    assert e.i24 == 0.0 and e.lhs_energy == 0.0


@pytest.mark.parametrize("mode", ["dirichlet", "robin"])
def test_energy_estimate_random_nonneg(mode, rng):
    spec = ProblemSpec(n=8, n_steps=16, bc_mode=mode, **FRICTION)
    for _ in range(3):
        g1, g2 = ControlField.random(spec, rng), ControlField.random(spec, rng)
        e = energy_terms(*_states(spec, g1, g2, 0.5), g1, g2, 0.5, spec)
        ab = e.alpha_total + e.beta_total
        assert e.lhs_energy <= 0.25 * ab + 0.1 * ab + 1e-14


@given(seed=st.integers(0, 2**32 - 1), mu=st.floats(0, 1), mode=st.sampled_from(["dirichlet", "robin"]))
def test_discrete_energy_balance_is_exact(seed, mu, mode):
    rng = np.random.default_rng(seed)
    spec = ProblemSpec(n=4, n_steps=4, bc_mode=mode, q=rng.uniform(0, 1), b=0.3, u_b=0.3)
    g1 = ControlField.random(spec, rng, -1, 1)
    g2 = ControlField.random(spec, rng, -1, 1)
    e = energy_terms(*_states(spec, g1, g2, mu), g1, g2, mu, spec)
    scale = 1 + abs(e.alpha_total) + abs(e.beta_total) + abs(e.i43) + e.dissipation
    assert abs(e.identity_residual) <= 1e-12 * scale


def test_energy_terms_grid_mismatch():
    spec = ProblemSpec(n=4, n_steps=4)
    g = ControlField.zeros(spec)
    u = solve(spec, g)
    short = StateTrajectory(u.values[:3], u.dt)
    with pytest.raises(ValueError):
        energy_terms(u, short, u, g, g, 0.5, spec)
    with pytest.raises(ValueError):
        energy_terms(u, u, u, g, g, 1.5, spec)


def test_convexity_gap_degenerate(rng):
    spec = ProblemSpec(n=8, n_steps=8, **FRICTION)
    g = ControlField.random(spec, rng)
    c = convexity_gap(g, g, 0.3, spec, 1.0)
    for v in (c.gap, c.state_term, c.u_diff_term, c.g_diff_term):
        assert abs(v) <= 1e-14
    g2 = ControlField.random(spec, rng)
    for mu in (0.0, 1.0):
        c = convexity_gap(g, g2, mu, spec, 1.0)
        assert c.gap == 0.0 and c.u_diff_term == 0.0 and c.g_diff_term == 0.0


@given(seed=st.integers(0, 2**32 - 1), mu=st.floats(0, 1), M=st.floats(1e-3, 1e3),
       mode=st.sampled_from(["dirichlet", "robin"]))
def test_gap_identity_holds_for_any_data(seed, mu, M, mode):
    rng = np.random.default_rng(seed)
    spec = ProblemSpec(n=4, n_steps=4, bc_mode=mode, q=0.5, b=-0.5, u_b=-0.5)
    g1 = ControlField.random(spec, rng, -2, 2)
    g2 = ControlField.random(spec, rng, -2, 2)
    assert convexity_gap(g1, g2, mu, spec, M).identity_error <= 1e-10


@pytest.mark.parametrize("mode", ["dirichlet", "robin"])
def test_strict_convexity_modulus_nonneg(mode, rng):
    spec = ProblemSpec(n=8, n_steps=8, bc_mode=mode, **FRICTION)
    for _ in range(3):
        g1, g2 = ControlField.random(spec, rng), ControlField.random(spec, rng)
        c = convexity_gap(g1, g2, 0.5, spec, 1.0)
        assert c.state_term >= 0
        assert c.gap >= c.g_diff_term * (1 - 1e-8)
