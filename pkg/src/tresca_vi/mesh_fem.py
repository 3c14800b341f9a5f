"""Uniform P1 meshes on (0,1) and the unit square, and the operators built on them.

Boundary tagging: Gamma1 is {x = 0} (including the two corners of that edge in
2D), Gamma2 is the rest of the boundary.  All mass-type operators are lumped
so that the backward-Euler system matrices are M-matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg, factorized

__all__ = [
    "Mesh",
    "FemOperators",
    "ConvergenceError",
    "build_mesh",
    "assemble",
    "operators",
    "solve_spd",
    "dual_norm_sq",
    "min_generalized_eig",
]


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap.

    ``residual`` holds the last residual norm, ``history`` whatever residual
    trace the raising routine kept.
    """

    def __init__(self, message, residual=np.nan, history=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else []
        self.step = step


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    n: int
    nodes: np.ndarray  # (n_nodes, dim)
    elements: np.ndarray  # (n_elem, dim + 1)
    gamma1_nodes: np.ndarray
    gamma2_nodes: np.ndarray
    interior_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return 1.0 / self.n


@dataclass(frozen=True, eq=False)
class FemOperators:
    mesh: Mesh
    c0: float
    mass_lumped: sp.csr_matrix
    stiffness: sp.csr_matrix  # grad-grad + c0 * lumped mass
    stiffness_pure: sp.csr_matrix  # grad-grad only
    gamma1_mass: sp.csr_matrix
    gamma2_weights: np.ndarray
    lambda_estimate: float

    @property
    def mass_diag(self) -> np.ndarray:
        return self.mass_lumped.diagonal()

    @property
    def gamma1_diag(self) -> np.ndarray:
        return self.gamma1_mass.diagonal()

    @property
    def gram(self) -> sp.csr_matrix:
        """Discrete H1 Gram matrix (stiffness_pure + lumped mass)."""
        return (self.stiffness_pure + self.mass_lumped).tocsr()


def build_mesh(dim: int, n: int) -> Mesh:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    n = int(n)
    if dim == 1:
        nodes = np.linspace(0.0, 1.0, n + 1)[:, None]
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        gamma1 = np.array([0])
        gamma2 = np.array([n])
    else:
        # node index = i + j*(n+1) with x = i/n, y = j/n
        s = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(s, s, indexing="xy")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        i, j = i.ravel(), j.ravel()
        p00 = i + j * (n + 1)
        p10 = p00 + 1
        p01 = p00 + (n + 1)
        p11 = p01 + 1
        # split along the (0,0)-(1,1) diagonal of every cell
        lower = np.column_stack([p00, p10, p11])
        upper = np.column_stack([p00, p11, p01])
        elements = np.vstack([lower, upper])
        ii = np.arange(nodes.shape[0]) % (n + 1)
        jj = np.arange(nodes.shape[0]) // (n + 1)
        on_x0 = ii == 0
        on_rest = (ii == n) | (jj == 0) | (jj == n)
        gamma1 = np.flatnonzero(on_x0)
        gamma2 = np.flatnonzero(on_rest & ~on_x0)
    boundary = np.zeros(nodes.shape[0], dtype=bool)
    boundary[gamma1] = True
    boundary[gamma2] = True
    interior = np.flatnonzero(~boundary)
    return Mesh(dim, n, nodes, elements.astype(np.int64), gamma1, gamma2, interior)


def _p1_stiffness(mesh: Mesh) -> sp.csr_matrix:
    nn = mesh.n_nodes
    el = mesh.elements
    if mesh.dim == 1:
        hx = np.diff(mesh.nodes[el, 0], axis=1).ravel()
        k = 1.0 / hx
        loc = np.stack([k, -k, -k, k], axis=1)  # row-major 2x2
        rows = np.repeat(el, 2, axis=1).ravel()
        cols = np.tile(el, (1, 2)).ravel()
    else:
        xy = mesh.nodes[el]  # (ne, 3, 2)
        e1 = xy[:, 1] - xy[:, 0]
        e2 = xy[:, 2] - xy[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        area = 0.5 * np.abs(det)
        # gradients of barycentric coordinates
        grads = np.empty((el.shape[0], 3, 2))
        grads[:, 1, 0] = e2[:, 1] / det
        grads[:, 1, 1] = -e2[:, 0] / det
        grads[:, 2, 0] = -e1[:, 1] / det
        grads[:, 2, 1] = e1[:, 0] / det
        grads[:, 0] = -grads[:, 1] - grads[:, 2]
        loc = area[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
        loc = loc.reshape(el.shape[0], 9)
        rows = np.repeat(el, 3, axis=1).ravel()
        cols = np.tile(el, (1, 3)).ravel()
    K = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(nn, nn)).tocsr()
    K.sum_duplicates()
    # exact symmetry, and exact zero row sums (partition of unity)
    K = 0.5 * (K + K.T)
    K = K.tolil()
    K.setdiag(0.0)
    K = K.tocsr()
    K.eliminate_zeros()
    rowsum = np.asarray(K.sum(axis=1)).ravel()
    return (K - sp.diags(rowsum)).tocsr()


def _lumped_mass(mesh: Mesh) -> np.ndarray:
    el = mesh.elements
    if mesh.dim == 1:
        vol = np.diff(mesh.nodes[el, 0], axis=1).ravel()
    else:
        xy = mesh.nodes[el]
        e1 = xy[:, 1] - xy[:, 0]
        e2 = xy[:, 2] - xy[:, 0]
        vol = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    share = np.repeat(vol / el.shape[1], el.shape[1])
    return np.bincount(el.ravel(), weights=share, minlength=mesh.n_nodes)


def _boundary_weights(mesh: Mesh, part: int) -> np.ndarray:
    """Lumped boundary mass of Gamma1 (``part=1``) or Gamma2 (``part=2``).

    1D uses counting measure. In 2D each boundary edge of the part gives half
    its length to each endpoint carrying that part's tag.
    """
    tagged = mesh.gamma1_nodes if part == 1 else mesh.gamma2_nodes
    w = np.zeros(mesh.n_nodes)
    if mesh.dim == 1:
        w[tagged] = 1.0
        return w
    n = mesh.n
    is_tagged = np.zeros(mesh.n_nodes, dtype=bool)
    is_tagged[tagged] = True
    k = np.arange(n)
    if part == 1:
        a, b = k * (n + 1), (k + 1) * (n + 1)  # x = 0
    else:
        a = np.concatenate([n + k * (n + 1), k, k + n * (n + 1)])
        b = np.concatenate([n + (k + 1) * (n + 1), k + 1, k + 1 + n * (n + 1)])
    for p in (a, b):
        np.add.at(w, p[is_tagged[p]], 0.5 / n)
    return w


def min_generalized_eig(A, G, free=None, tol=1e-8, max_iter=500) -> float:
    """Guaranteed-from-below estimate of min x'Ax / x'Gx by inverse iteration.

    Runs inverse power iteration on (A, G), optionally restricted to the index
    set ``free``, then subtracts the eigenvalue-inclusion radius
    ||r||_{G^-1} / ||x||_G from the final Rayleigh quotient so that the
    returned number does not exceed the smallest generalized eigenvalue once
    the iteration has locked onto it.
    """
    A = sp.csr_matrix(A)
    G = sp.csr_matrix(G)
    if free is not None:
        A = A[free][:, free]
        G = G[free][:, free]
    m = A.shape[0]
    x = np.ones(m) + np.linspace(0.0, 1.0, m)
    x /= np.sqrt(x @ (G @ x))
    rq_old = np.inf
    for _ in range(max_iter):
        y = solve_spd(A, G @ x, 1e-13)
        x = y / np.sqrt(y @ (G @ y))
        rq = float(x @ (A @ x))
        if abs(rq - rq_old) <= tol * abs(rq):
            break
        rq_old = rq
    r = A @ x - rq * (G @ x)
    radius = np.sqrt(max(float(r @ solve_spd(G, r, 1e-13)), 0.0))
    # relative guard against rounding in the Rayleigh quotient itself
    return max((rq - radius) * (1.0 - 1e-12), 0.0)


def assemble(mesh: Mesh, c0: float = 1.0) -> FemOperators:
    if c0 < 0:
        raise ValueError(f"c0 must be >= 0, got {c0}")
    Kp = _p1_stiffness(mesh)
    m = _lumped_mass(mesh)
    M = sp.diags(m).tocsr()
    K = (Kp + c0 * M).tocsr()
    w1 = _boundary_weights(mesh, 1)
    w2 = _boundary_weights(mesh, 2)
    G = (Kp + M).tocsr()
    if c0 > 0:
        lam = min_generalized_eig(K, G)
    else:
        # grad-grad alone is only coercive on functions vanishing on Gamma1
        free = np.setdiff1d(np.arange(mesh.n_nodes), mesh.gamma1_nodes)
        lam = min_generalized_eig(K, G, free=free)
    return FemOperators(mesh, float(c0), M, K, Kp, sp.diags(w1).tocsr(), w2, lam)


@lru_cache(maxsize=32)
def operators(dim: int, n: int, c0: float = 1.0) -> FemOperators:
    """Cached ``assemble(build_mesh(dim, n), c0)``."""
    return assemble(build_mesh(dim, n), c0)


def solve_spd(A, rhs, tol=1e-12, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns x with ||Ax - rhs||_2 <= tol * ||rhs||_2. Raises ConvergenceError
    carrying the final residual if the iteration cap is reached.
    """
    A = sp.csr_matrix(A)
    rhs = np.asarray(rhs, dtype=float)
    nrm = np.linalg.norm(rhs)
    if nrm == 0.0:
        return np.zeros_like(rhs)
    d = A.diagonal()
    if np.any(d <= 0):
        raise ValueError("matrix is not positive definite (nonpositive diagonal)")
    if max_iter is None:
        max_iter = max(20 * A.shape[0], 200)
    precond = LinearOperator(A.shape, matvec=lambda v: v / d, dtype=float)
    x, info = cg(A, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=max_iter, M=precond)
    res = np.linalg.norm(A @ x - rhs)
    if res > tol * nrm:
        # scipy measures the preconditioned recursion; polish on the true residual
        for _ in range(3):
            dx, _ = cg(A, rhs - A @ x, rtol=tol, atol=0.0, maxiter=max_iter, M=precond)
            x = x + dx
            res = np.linalg.norm(A @ x - rhs)
            if res <= tol * nrm:
                break
        else:
            raise ConvergenceError(
                f"CG did not reach rtol={tol:g} (residual {res:.3e}, info={info})",
                residual=res,
            )
    return x


@lru_cache(maxsize=32)
def _gram_solver(ops: FemOperators):
    return factorized(ops.gram.tocsc())


def dual_norm_sq(f, ops: FemOperators) -> float:
    """f' G^-1 f with G the H1 Gram matrix: squared V' norm of a load vector."""
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        return 0.0
    return float(f @ _gram_solver(ops)(f))
