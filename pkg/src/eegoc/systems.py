"""
Saddle-point systems: the optimal-control KKT system and the stabilised
mixed quasi-reversibility (QRM) system, plus their direct and iterative
solvers.

KKT unknowns are ordered ``(f, lam, u)``: ``M`` cortical control DOFs, then
``N`` multiplier DOFs, then ``N`` potential DOFs.  With ``B`` stored as
``M x N`` the matrix reads::

    [  A   -B   0 ] [f  ]   [0]
    [ -B^T  0   E ] [lam] = [0]
    [  0    E   G ] [u  ]   [r]

where ``A = eps * A_core + gamma * M_f``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, InputError, ParameterError, SingularMatrixError
from .fem import assemble_volume_stiffness
from .mesh import BoundaryTag

PIVOT_RTOL = 1e-14


@dataclass(frozen=True, eq=False)
class KKTSystem:
    A_core: sp.csr_matrix
    surface_mass: sp.csr_matrix | None
    B: sp.csr_matrix
    E: sp.csr_matrix
    G: sp.csr_matrix
    r: np.ndarray
    epsilon: float
    gamma: float
    A: sp.csr_matrix
    matrix: sp.csc_matrix
    rhs: np.ndarray

    @property
    def M(self):
        return self.B.shape[0]

    @property
    def N(self):
        return self.B.shape[1]

    @property
    def ordering(self):
        return ("f", "lam", "u")

    def preconditioner(self):
        return _augmented_lagrangian_preconditioner(self)

    def stationarity_residuals(self, xi):
        """Relative residual of each of the three block equations.

        Each block residual is divided by the sum of the norms of the terms
        that make it up, so the value is scale free; an all-zero block counts
        as exactly satisfied.
        """
        f, lam, u = split_solution(self, xi)
        blocks = [
            [self.A @ f, -(self.B @ lam)],
            [-(self.B.T @ f), self.E @ u],
            [self.E @ lam, self.G @ u, -self.r],
        ]
        out = []
        for terms in blocks:
            res = np.linalg.norm(sum(terms))
            scale = sum(np.linalg.norm(t) for t in terms)
            out.append(0.0 if scale == 0 else res / scale)
        return tuple(out)


def default_gamma(A_core):
    """Mass shift ``1e-12 * trace(A_core) / M`` used when none is given."""
    return 1e-12 * float(A_core.diagonal().sum()) / A_core.shape[0]


def build_kkt(A_core, B, E, G, r, epsilon, gamma=None, surface_mass=None):
    """Assemble the optimal-control KKT system.

    Parameters
    ----------
    A_core : (M, M) sparse
        Unscaled surface stiffness.
    B : (M, N) sparse
        Surface/volume mass coupling.
    E : (N, N) sparse
        Volume stiffness with conductivity.
    G : (N, N) sparse, r : (N,) array
        Data blocks.
    epsilon : float
        Regularisation weight, strictly positive.
    gamma : float, optional
        Mass shift on the control block; defaults to :func:`default_gamma`.
        Requires ``surface_mass`` whenever it is non-zero.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    A_core, B, E, G = (sp.csr_matrix(x) for x in (A_core, B, E, G))
    m, n = B.shape
    if m == 0:
        raise InputError("control space is empty (M = 0)")
    if A_core.shape != (m, m) or E.shape != (n, n) or G.shape != (n, n):
        raise InputError(f"block shapes disagree: A {A_core.shape}, B {B.shape}, "
                         f"E {E.shape}, G {G.shape}")
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if len(r) != n:
        raise InputError(f"rhs has length {len(r)}, expected {n}")
    if gamma is None:
        gamma = default_gamma(A_core)
    if gamma < 0:
        raise ParameterError("gamma must be non-negative")
    A = epsilon * A_core
    if gamma > 0:
        if surface_mass is None:
            raise InputError("a positive gamma needs the surface mass matrix")
        surface_mass = sp.csr_matrix(surface_mass)
        A = A + gamma * surface_mass
    A = A.tocsr()
    mat = sp.bmat([[A, -B, None], [-B.T, None, E], [None, E, G]], format="csc")
    rhs = np.concatenate([np.zeros(m + n), r])
    return KKTSystem(A_core, surface_mass, B, E, G, r, float(epsilon), float(gamma), A, mat, rhs)


def split_solution(system, xi):
    """Split a KKT solution vector into ``(f, lam, u)``."""
    m, n = system.M, system.N
    xi = np.asarray(xi).reshape(-1)
    if m == 0:
        raise InputError("control space is empty (M = 0)")
    if len(xi) != m + 2 * n:
        raise InputError(f"solution has length {len(xi)}, expected {m + 2 * n}")
    return xi[:m], xi[m:m + n], xi[m + n:]


# --------------------------------------------------------------------------
# mixed quasi-reversibility
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QRMSystem:
    """Stabilised mixed QRM system over the free DOFs of ``(u, lam)``.

    ``u`` is fixed to ``g_D`` on the scalp nodes and ``lam`` vanishes on the
    cortex nodes; both conditions are eliminated from the matrix.
    """

    epsilon: float
    delta: float
    n_nodes: int
    u_free: np.ndarray
    lam_free: np.ndarray
    scalp_nodes: np.ndarray
    g_D: np.ndarray
    K: sp.csr_matrix
    E: sp.csr_matrix
    matrix: sp.csc_matrix
    rhs: np.ndarray

    def expand(self, x):
        """Full nodal vectors ``(u, lam)`` from a reduced solution."""
        nu = len(self.u_free)
        u = np.zeros(self.n_nodes)
        lam = np.zeros(self.n_nodes)
        u[self.scalp_nodes] = self.g_D
        u[self.u_free] = x[:nu]
        lam[self.lam_free] = x[nu:]
        return u, lam

    def variational_residuals(self, x):
        """Residuals of the two QRM equations tested on ``V_0`` and ``Q``, relative."""
        u, lam = self.expand(x)
        r1 = [self.epsilon * (self.K @ u)[self.u_free], (self.E @ lam)[self.u_free]]
        r2 = [(self.E @ u)[self.lam_free], -self.delta * (self.K @ lam)[self.lam_free]]
        out = []
        for terms in (r1, r2):
            scale = sum(np.linalg.norm(t) for t in terms)
            out.append(0.0 if scale == 0 else np.linalg.norm(sum(terms)) / scale)
        return tuple(out)

    def preconditioner(self):
        uf, lf = self.u_free, self.lam_free
        k_uu = (self.epsilon * self.K[uf][:, uf]).tocsc()
        e_max = abs(self.E).max()
        k_max = abs(self.K).max()
        s = self.delta + (e_max / k_max) ** 2 / self.epsilon
        k_ll = (s * self.K[lf][:, lf]).tocsc()
        return _block_diag_operator([_factor(k_uu), _factor(k_ll)], [len(uf), len(lf)])


def build_qrm(mesh, cond, g_D, epsilon, delta):
    """Assemble the stabilised mixed QRM system.

    ``g_D`` holds the potential on the scalp nodes, ordered as
    ``mesh.boundary_nodes(SCALP)``; a full nodal vector is also accepted.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    if not delta > 0:
        raise ParameterError(f"delta must be positive (stabilisation is mandatory), got {delta}")
    scalp = mesh.boundary_nodes(BoundaryTag.SCALP)
    cortex = mesh.boundary_nodes(BoundaryTag.CORTEX)
    g = np.asarray(g_D, dtype=np.float64).reshape(-1)
    if len(g) == mesh.n_nodes:
        g = g[scalp]
    if len(g) != len(scalp):
        raise InputError(f"g_D has {len(g)} values, the scalp has {len(scalp)} nodes")
    if not np.all(np.isfinite(g)):
        raise InputError("g_D is missing values on the scalp")
    n = mesh.n_nodes
    u_free = np.setdiff1d(np.arange(n), scalp)
    lam_free = np.setdiff1d(np.arange(n), cortex)
    K = assemble_volume_stiffness(mesh)
    E = assemble_volume_stiffness(mesh, cond)

    a11 = epsilon * K[u_free][:, u_free]
    a12 = E[u_free][:, lam_free]
    a22 = -delta * K[lam_free][:, lam_free]
    mat = sp.bmat([[a11, a12], [a12.T, a22]], format="csc")
    rhs = np.concatenate([
        -epsilon * (K[u_free][:, scalp] @ g),
        -(E[lam_free][:, scalp] @ g),
    ])
    return QRMSystem(float(epsilon), float(delta), n, u_free, lam_free, scalp, g, K, E, mat, rhs)


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------

@dataclass
class SolveReport:
    method: str
    relative_residual: float
    wall_time: float
    iterations: int | None = None
    stats: dict = field(default_factory=dict)


def _factor(mat):
    mat = sp.csc_matrix(mat)
    try:
        lu = spla.splu(mat, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularMatrixError(f"factorization failed: {exc}") from None
    # compare each pivot with the scale of the row it came from, so that
    # badly scaled but nonsingular blocks are not mistaken for rank loss
    diag = np.abs(lu.U.diagonal())
    rowmax = np.asarray(abs(mat).max(axis=1).toarray()).reshape(-1)
    scale = np.empty_like(rowmax)
    scale[lu.perm_r] = rowmax
    small = np.nonzero(diag <= PIVOT_RTOL * scale)[0]
    if len(small):
        row = int(np.argsort(lu.perm_r)[small[0]])
        raise SingularMatrixError(f"zero pivot at row {row}", pivot=row)
    return lu


def _block_diag_operator(factors, sizes):
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def apply(x):
        x = np.asarray(x).reshape(-1)
        return np.concatenate([f.solve(x[a:b]) for f, a, b in zip(factors, offsets[:-1], offsets[1:])])

    n = int(offsets[-1])
    return spla.LinearOperator((n, n), matvec=apply, dtype=np.float64)


def _augmented_lagrangian_preconditioner(system):
    # primal block diag(A, G) augmented with C^T D^-1 C, C = [-B^T, E], D = diag(E)
    m, n = system.M, system.N
    d_inv = sp.diags(1.0 / system.E.diagonal())
    C = sp.hstack([-system.B.T, system.E]).tocsr()
    H = sp.block_diag([system.A, system.G]).tocsr()
    H_aug = (H + C.T @ d_inv @ C).tocsc()
    D = sp.diags(system.E.diagonal()).tocsc()
    # unknowns are ordered (f, lam, u); the operator is built over (f, u | lam)
    f_primal = _factor(H_aug)
    f_dual = _factor(D)

    def apply(x):
        x = np.asarray(x).reshape(-1)
        primal = f_primal.solve(np.concatenate([x[:m], x[m + n:]]))
        dual = f_dual.solve(x[m:m + n])
        return np.concatenate([primal[:m], dual, primal[m:]])

    size = m + 2 * n
    return spla.LinearOperator((size, size), matvec=apply, dtype=np.float64)


def equilibrate(matrix):
    """Symmetric diagonal scaling ``S M S`` with ``S = 1/sqrt(max_j |M_ij|)``."""
    a = abs(sp.csr_matrix(matrix))
    rowmax = np.asarray(a.max(axis=1).toarray()).reshape(-1)
    rowmax[rowmax == 0] = 1.0
    return 1.0 / np.sqrt(rowmax)


def solve(system, tol=1e-10, method="direct", *, equilibrate_rows=False, refine=2, maxiter=5000):
    """Solve a :class:`KKTSystem` or :class:`QRMSystem`.

    Parameters
    ----------
    tol : float
        Required relative residual ``||M x - b|| / ||b||``.
    method : {"direct", "iterative"}
        ``direct`` uses a sparse LU factorization with partial pivoting and a
        fill-reducing column ordering; ``iterative`` runs preconditioned
        MINRES.
    equilibrate_rows : bool
        Factor the symmetrically scaled matrix instead (direct only).
    refine : int
        Number of iterative-refinement sweeps always applied after a direct
        solve; more are added (up to five) while the residual exceeds ``tol``.

    Returns
    -------
    x : ndarray
    report : SolveReport
    """
    if not tol > 0:
        raise ParameterError("tol must be positive")
    t0 = time.perf_counter()
    mat, b = system.matrix, system.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(mat.shape[0]), SolveReport(method, 0.0, time.perf_counter() - t0, 0)

    if method == "direct":
        scale = equilibrate(mat) if equilibrate_rows else None
        work = mat if scale is None else (sp.diags(scale) @ mat @ sp.diags(scale)).tocsc()
        lu = _factor(work)
        rhs = b if scale is None else scale * b
        y = lu.solve(rhs)
        x = y if scale is None else scale * y
        # refinement sweeps fix the small blocks (eps * A_core) that the
        # global residual norm does not see
        refinements = 0
        res = np.linalg.norm(mat @ x - b) / bnorm
        while refinements < refine or (res > tol and refinements < refine + 5):
            r = b - mat @ x
            corr = lu.solve(r if scale is None else scale * r)
            x = x + (corr if scale is None else scale * corr)
            res = np.linalg.norm(mat @ x - b) / bnorm
            refinements += 1
        stats = {"nnz_L": int(lu.L.nnz), "nnz_U": int(lu.U.nnz), "refinements": refinements}
        report = SolveReport("direct", float(res), time.perf_counter() - t0, None, stats)
        if res > tol:
            raise ConvergenceError(f"direct solve reached residual {res:.3e} > {tol:.1e}", x, res)
        return x, report

    if method == "iterative":
        P = system.preconditioner()
        count = [0]

        def cb(_):
            count[0] += 1

        # MINRES stops on the preconditioned residual; warm restarts close the
        # gap to the true residual when the preconditioner is loose
        x = None
        for _ in range(4):
            x, info = spla.minres(mat, b, x0=x, M=P, rtol=tol * 1e-2,
                                  maxiter=max(maxiter - count[0], 1), callback=cb)
            res = np.linalg.norm(mat @ x - b) / bnorm
            if res <= tol or count[0] >= maxiter or not np.all(np.isfinite(x)):
                break
        report = SolveReport("iterative", float(res), time.perf_counter() - t0, count[0], {"info": int(info)})
        if not np.all(np.isfinite(x)) or res > tol:
            raise ConvergenceError(f"MINRES stopped at residual {res:.3e} after {count[0]} iterations",
                                   x, res)
        return x, report

    raise ParameterError(f"unknown method {method!r}")


def export_matrix(matrix, path):
    """Write the upper triangle of a symmetric matrix in coordinate text format."""
    up = sp.triu(sp.csr_matrix(matrix)).tocoo()
    order = np.lexsort((up.col, up.row))
    lines = [f"{matrix.shape[0]} {matrix.shape[1]} {up.nnz}"]
    lines += [f"{i} {j} {v!r}" for i, j, v in
              zip(up.row[order].tolist(), up.col[order].tolist(), up.data[order].tolist())]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
