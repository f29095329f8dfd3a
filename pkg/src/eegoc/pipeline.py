"""
End-to-end reconstruction workflows.

The main entry point is :func:`reconstruct`, which assembles the blocks,
solves the KKT system once and reports data-fit metrics.  The dense
lead-field oracle in :class:`LeadFieldOracle` is a verification device
only: it solves one forward problem per control DOF and is capped in size.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import analytic
from .errors import CompatibilityError, InputError, ParameterError, ResourceError, UsageError
from .fem import (
    ConductivityMap,
    ElectrodeSet,
    PointLocator,
    assemble_data_blocks,
    assemble_observation,
    assemble_surface_mass,
    assemble_surface_mass_coupling,
    assemble_surface_stiffness,
    assemble_volume_stiffness,
    nodal_volumes,
    tet_gradients,
)
from .mesh import BoundaryTag, build_shell_mesh, extract_cortex, project_to_boundary
from .systems import SolveReport, build_kkt, default_gamma, solve, split_solution

COMPAT_RTOL = 1e-10
DEFAULT_ORACLE_CAP = 2000
DEFAULT_EPSILONS = tuple(10.0**-k for k in range(5, 13))


@dataclass(frozen=True, eq=False)
class ProblemBlocks:
    """Everything that does not depend on the data or on epsilon."""

    mesh: object
    cond: ConductivityMap
    electrodes: ElectrodeSet
    surface: object
    E: sp.csr_matrix
    A_core: sp.csr_matrix
    surface_mass: sp.csr_matrix
    B: sp.csr_matrix
    Q: sp.csr_matrix

    @property
    def M(self):
        return self.surface.n_nodes

    @property
    def N(self):
        return self.mesh.n_nodes

    def cortex_trace(self, u):
        return np.asarray(u)[self.surface.surf_to_vol]

    def lumped_areas(self):
        return np.asarray(self.surface_mass.sum(axis=1)).reshape(-1)


def assemble_problem(mesh, cond, electrodes):
    cond = ConductivityMap(cond)
    surf = extract_cortex(mesh)
    return ProblemBlocks(
        mesh=mesh,
        cond=cond,
        electrodes=electrodes,
        surface=surf,
        E=assemble_volume_stiffness(mesh, cond),
        A_core=assemble_surface_stiffness(surf),
        surface_mass=assemble_surface_mass(surf),
        B=assemble_surface_mass_coupling(surf, mesh),
        Q=assemble_observation(mesh, electrodes),
    )


def rmse(d, u_hat, s):
    """Noise-normalised RMS misfit ``sqrt(mean(((d - u_hat) / s)**2))``."""
    d, u_hat, s = (np.asarray(x, dtype=np.float64).reshape(-1) for x in (d, u_hat, s))
    if not (len(d) == len(u_hat) == len(s)):
        raise InputError("d, u_hat and s must have equal length")
    if np.any(s <= 0):
        raise UsageError("all noise standard deviations must be positive")
    return float(np.sqrt(np.mean(((d - u_hat) / s) ** 2)))


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


@dataclass
class ReconstructionResult:
    f: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    predicted: np.ndarray
    residual_norm: float
    rmse: float | None
    epsilon: float
    gamma: float
    report: SolveReport
    stationarity: tuple

    def f_zero_mean(self, areas):
        """Control projected onto zero mean, the quotient-space representative."""
        return self.f - (areas @ self.f) / areas.sum()


def reconstruct(mesh, cond, electrodes, d, epsilon, *, gamma=None, s=None, method="direct",
                tol=1e-10, blocks=None):
    """Estimate the cortical control from electrode data with one KKT solve.

    Parameters
    ----------
    d : (K,) array
        Measured potentials.
    epsilon : float
        Regularisation weight.
    s : (K,) array, optional
        Noise standard deviations; when given the RMSE is reported.
    blocks : ProblemBlocks, optional
        Pre-assembled data-independent blocks (sweeps reuse them).
    """
    if blocks is None:
        blocks = assemble_problem(mesh, cond, electrodes)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    G, r = assemble_data_blocks(blocks.Q, blocks.electrodes, d)
    system = build_kkt(blocks.A_core, blocks.B, blocks.E, G, r, epsilon,
                       gamma=gamma, surface_mass=blocks.surface_mass)
    xi, report = solve(system, tol=tol, method=method)
    f, lam, u = split_solution(system, xi)
    pred = blocks.Q @ u
    w = blocks.electrodes.weights
    res = float(np.linalg.norm(w * (pred - d)))
    e = rmse(d, pred, s) if s is not None else None
    return ReconstructionResult(f.copy(), lam.copy(), u.copy(), pred, res, e, system.epsilon,
                                system.gamma, report, system.stationarity_residuals(xi))


# --------------------------------------------------------------------------
# pure Neumann solves
# --------------------------------------------------------------------------

class NeumannSolver:
    """Solve ``E x = b`` with the gauge ``c . x = 0`` through a bordered system.

    The factorization is computed once and reused for every right-hand side.
    """

    def __init__(self, E, gauge):
        gauge = np.asarray(gauge, dtype=np.float64).reshape(-1, 1)
        n = E.shape[0]
        mat = sp.bmat([[E, sp.csr_matrix(gauge)], [sp.csr_matrix(gauge.T), None]], format="csc")
        self._lu = spla.splu(mat, permc_spec="COLAMD")
        self._n = n
        self._mat = mat

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=np.float64)
        single = rhs.ndim == 1
        b = rhs.reshape(self._n, -1)
        full = np.vstack([b, np.zeros((1, b.shape[1]))])
        x = self._lu.solve(full)
        res = full - self._mat @ x
        x = x + self._lu.solve(res)
        out = x[: self._n]
        return out[:, 0] if single else out


def forward_solve(mesh, cond, f, *, blocks=None, solver=None):
    """Potential generated by the cortical source density ``f``.

    Solves ``E u = B^T f`` with zero volume mean.  ``f`` must integrate to
    zero over the cortex (relative tolerance 1e-10), as required for the
    Neumann problem to be solvable.
    """
    if blocks is None:
        surf = extract_cortex(mesh)
        B = assemble_surface_mass_coupling(surf, mesh)
        E = assemble_volume_stiffness(mesh, cond)
    else:
        mesh, B, E = blocks.mesh, blocks.B, blocks.E
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if len(f) != B.shape[0]:
        raise InputError(f"f has {len(f)} entries, the cortex has {B.shape[0]} nodes")
    areas = np.asarray(B.sum(axis=1)).reshape(-1)
    total = float(areas @ f)
    if abs(total) > COMPAT_RTOL * max(float(np.abs(f).max(initial=0.0)), 1e-300) * areas.sum():
        raise CompatibilityError(f"source integrates to {total:.3e}; it must have zero mean")
    if not np.any(f):
        return np.zeros(B.shape[1])
    solver = solver or NeumannSolver(E, nodal_volumes(mesh))
    return solver.solve(B.T @ f)


# --------------------------------------------------------------------------
# lead-field oracle
# --------------------------------------------------------------------------

@dataclass
class LeadFieldOracle:
    """Dense control-to-data map for small meshes (verification only).

    ``L[:, j]`` is the weighted electrode response ``W Q u_j`` of the
    zero-mean-projected control basis vector ``j``.  ``const`` is the
    weighted response ``W 1`` of a constant shift of the potential, which
    the pure-Neumann state leaves free and the data term fixes.
    """

    L: np.ndarray
    const: np.ndarray
    weights: np.ndarray
    A_core: np.ndarray
    surface_mass: np.ndarray
    blocks: ProblemBlocks = field(repr=False)

    def regulariser(self, epsilon, gamma):
        return epsilon * self.A_core + gamma * self.surface_mass

    def objective(self, f, c, d, epsilon, gamma):
        res = self.L @ f + c * self.const - self.weights * d
        return 0.5 * res @ res + 0.5 * f @ self.regulariser(epsilon, gamma) @ f

    def gradient(self, f, c, d, epsilon, gamma):
        """Gradient with respect to ``(f, c)`` of :meth:`objective`."""
        res = self.L @ f + c * self.const - self.weights * d
        return np.concatenate([self.L.T @ res + self.regulariser(epsilon, gamma) @ f,
                               [self.const @ res]])

    def tikhonov(self, d, epsilon, gamma):
        """Dense minimiser ``(f, c)`` of :meth:`objective`.

        Solved as the stacked least-squares problem
        ``min || [L 1w; R^(1/2) 0] z - [W d; 0] ||`` with an SVD-based solver;
        forming the normal equations would square the condition number.
        """
        m = self.L.shape[1]
        lam, V = np.linalg.eigh(self.regulariser(epsilon, gamma))
        root = np.sqrt(np.clip(lam, 0.0, None))[:, None] * V.T
        J = np.vstack([np.column_stack([self.L, self.const]),
                       np.column_stack([root, np.zeros(m)])])
        rhs = np.concatenate([self.weights * np.asarray(d, dtype=np.float64), np.zeros(m)])
        z = np.linalg.lstsq(J, rhs, rcond=None)[0]
        return z[:m], float(z[m])

    def adjoint(self, u, d):
        """Multiplier from one Neumann solve: ``E lam = Q^T W^2 (d - Q u)``.

        The gauge ``int_cortex lam dS = 0`` is the one the KKT system selects.
        """
        b = self.blocks
        rhs = b.Q.T @ (self.weights**2 * (d - b.Q @ u))
        gauge = np.asarray(b.B.T @ np.ones(b.M)).reshape(-1)
        return NeumannSolver(b.E, gauge).solve(rhs)


def reduced_gradient(blocks, f, c, d, epsilon, gamma=None, *, solver=None):
    """Adjoint-based gradient of the reduced functional with respect to ``(f, c)``.

    The functional is the one of :meth:`LeadFieldOracle.objective`: the
    state is the zero-volume-mean response to the zero-mean part of ``f``,
    shifted by ``c``.  One forward and one adjoint Neumann solve are used;
    no lead field is formed.
    """
    b = blocks
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if gamma is None:
        gamma = default_gamma(b.A_core)
    areas = b.lumped_areas()
    solver = solver or NeumannSolver(b.E, nodal_volumes(b.mesh))
    fp = f - (areas @ f) / areas.sum()
    u = solver.solve(b.B.T @ fp)
    w = b.electrodes.weights
    res = w * (b.Q @ u + c - d)
    lam = solver.solve(b.Q.T @ (w * res))
    g = b.B @ lam
    g = g - areas * g.sum() / areas.sum()
    g = g + epsilon * (b.A_core @ f) + gamma * (b.surface_mass @ f)
    return np.concatenate([g, [w @ res]])


def build_lead_field_oracle(mesh, cond, electrodes, *, cap=DEFAULT_ORACLE_CAP, blocks=None):
    if blocks is None:
        blocks = assemble_problem(mesh, cond, electrodes)
    m = blocks.M
    if m > cap:
        raise ResourceError(f"lead-field oracle needs {m} forward solves, cap is {cap}")
    areas = blocks.lumped_areas()
    P = np.eye(m) - np.outer(np.ones(m), areas) / areas.sum()
    solver = NeumannSolver(blocks.E, nodal_volumes(blocks.mesh))
    U = solver.solve(np.asarray(blocks.B.T @ P))
    w = blocks.electrodes.weights
    L = w[:, None] * np.asarray(blocks.Q @ U)
    return LeadFieldOracle(L, w.copy(), w.copy(), blocks.A_core.toarray(),
                           blocks.surface_mass.toarray(), blocks)


# --------------------------------------------------------------------------
# epsilon sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepCurve:
    epsilons: np.ndarray
    residual_norms: np.ndarray
    rmses: np.ndarray
    results: list = field(default_factory=list, repr=False)

    def rows(self):
        return list(zip(self.epsilons.tolist(), self.residual_norms.tolist(), self.rmses.tolist()))

    def first_below(self, threshold=1.0):
        """Largest epsilon whose RMSE drops below ``threshold`` (None if never)."""
        for eps, e in zip(self.epsilons, self.rmses):
            if e < threshold:
                return float(eps)
        return None

    def crosses(self, threshold=1.0):
        e = self.rmses[np.isfinite(self.rmses)]
        return bool(np.any(e < threshold) and np.any(e > threshold))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "residual_norm", "rmse"])
        for eps, res, e in self.rows():
            w.writerow([f"{eps:.17g}", f"{res:.17g}", f"{e:.17g}"])
        return buf.getvalue()


def sweep_epsilon(blocks, d, epsilons=DEFAULT_EPSILONS, *, s=None, gamma=None, method="direct",
                  tol=1e-10, threads=1):
    """One reconstruction per epsilon, returned in descending epsilon order."""
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if not eps:
        raise ParameterError("epsilon list is empty")
    if eps[-1] <= 0:
        raise ParameterError("epsilons must be positive")
    if len(set(eps)) != len(eps):
        raise ParameterError("epsilons must be distinct")

    def run(e):
        return reconstruct(None, None, None, d, e, gamma=gamma, s=s, method=method, tol=tol,
                           blocks=blocks)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, eps))
    else:
        results = [run(e) for e in eps]
    return SweepCurve(
        np.array(eps),
        np.array([r.residual_norm for r in results]),
        np.array([np.nan if r.rmse is None else r.rmse for r in results]),
        results,
    )


# --------------------------------------------------------------------------
# spherical-shell experiment helpers
# --------------------------------------------------------------------------

@dataclass
class ShellExperiment:
    mesh: object
    field: analytic.ShellHarmonicField
    electrodes: ElectrodeSet
    d_true: np.ndarray
    blocks: ProblemBlocks

    def true_cortex_trace(self):
        pts = self.blocks.surface.points
        return analytic.eval_field(self.field, pts, check=False)

    def noisy(self, level, seed):
        return analytic.add_noise(self.d_true, analytic.NoiseSpec(level, seed))


def shell_experiment(level, *, r_in=0.7, r_out=1.0, n_electrodes=198, l_max=25,
                     cross=analytic.CrossSpec(), field=None, sigma=1.0, mesh=None,
                     base_subdivisions=3):
    """Mesh, ground-truth field, electrodes on the faceted scalp and clean data."""
    mesh = mesh or build_shell_mesh(r_in, r_out, level, base_subdivisions=base_subdivisions)
    if field is None:
        field = analytic.fit_shell_field(lambda p: analytic.cross_pattern(p, cross), l_max, r_in, r_out)
    layout = analytic.electrode_layout_hemisphere(n_electrodes, r_out)
    pos = project_to_boundary(layout.positions, mesh, BoundaryTag.SCALP)
    electrodes = ElectrodeSet(pos, layout.weights)
    d = analytic.eval_field(field, pos, check=False)
    cond = ConductivityMap.uniform(mesh, sigma)
    return ShellExperiment(mesh, field, electrodes, d, assemble_problem(mesh, cond, electrodes))


# --------------------------------------------------------------------------
# convergence
# --------------------------------------------------------------------------

_TET_RULE_A = 0.5854101966249685
_TET_RULE_B = 0.1381966011250105
_TET_RULE = np.full((4, 4), _TET_RULE_B) + np.eye(4) * (_TET_RULE_A - _TET_RULE_B)


def forward_errors(mesh, field, u_h, sigma=1.0):
    """H1-seminorm and L2 errors of a P1 potential against an analytic field.

    The constant offset is removed from the L2 error (pure-Neumann gauge).
    """
    g, vol = tet_gradients(mesh)
    grad_h = np.einsum("tid,ti->td", g, u_h[mesh.tets])
    p = mesh.vertices[mesh.tets]
    qp = np.einsum("qi,tid->tqd", _TET_RULE, p).reshape(-1, 3)
    w = np.repeat(vol / 4.0, 4)
    exact = analytic.eval_field(field, qp, check=False)
    grad = analytic.eval_gradient(field, qp)
    uq = (_TET_RULE @ u_h[mesh.tets].T).T.reshape(-1)
    h1 = np.sqrt(np.sum(w * np.sum((np.repeat(grad_h, 4, axis=0) - grad) ** 2, axis=1)))
    diff = uq - exact
    diff -= (w @ diff) / w.sum()
    l2 = np.sqrt(np.sum(w * diff**2))
    return float(h1), float(l2)


def neumann_data(field, surf, sigma=1.0):
    """Cortical flux ``sigma du/dnu`` of the field, with the normal pointing out of the shell."""
    return -sigma * analytic.eval_radial_derivative(field, surf.points)


def fit_rate(h, err):
    """Slope of ``log(err)`` against ``log(h)`` by least squares."""
    h, err = np.asarray(h, float), np.asarray(err, float)
    if np.any(err <= 0):
        return math.nan
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


@dataclass
class ConvergenceTable:
    levels: list
    h: list
    n_tets: list
    h1_errors: list
    l2_errors: list
    h1_rate: float
    l2_rate: float
    kkt_levels: list = field(default_factory=list)
    kkt_h: list = field(default_factory=list)
    kkt_errors: list = field(default_factory=list)
    kkt_rate: float = math.nan
    stationarity: list = field(default_factory=list)

    def lines(self):
        out = ["level  h          tets     H1-error     L2-error"]
        for row in zip(self.levels, self.h, self.n_tets, self.h1_errors, self.l2_errors):
            out.append("{:<6d} {:<10.4g} {:<8d} {:<12.5e} {:<12.5e}".format(*row))
        out.append(f"rates: H1 {self.h1_rate:.3f}  L2 {self.l2_rate:.3f}")
        if self.kkt_errors:
            out.append("KKT self-convergence:")
            for row in zip(self.kkt_levels, self.kkt_h, self.kkt_errors):
                out.append("{:<6d} {:<10.4g} {:<12.5e}".format(*row))
            out.append(f"rate: {self.kkt_rate:.3f}")
        return out


def forward_convergence(levels, field, *, sigma=1.0, base_subdivisions=3):
    h, tets, e1, e2 = [], [], [], []
    for lev in levels:
        mesh = build_shell_mesh(field.r_in, field.r_out, lev, base_subdivisions=base_subdivisions)
        cond = ConductivityMap.uniform(mesh, sigma)
        surf = extract_cortex(mesh)
        B = assemble_surface_mass_coupling(surf, mesh)
        f = neumann_data(field, surf, sigma)
        areas = np.asarray(B.sum(axis=1)).reshape(-1)
        # the faceted cortex does not integrate the exact flux to zero
        f = f - (areas @ f) / areas.sum()
        E = assemble_volume_stiffness(mesh, cond)
        u = NeumannSolver(E, nodal_volumes(mesh)).solve(B.T @ f) if np.any(f) else np.zeros(mesh.n_nodes)
        a, b = forward_errors(mesh, field, u, sigma)
        h.append(mesh.max_edge_length())
        tets.append(mesh.n_tets)
        e1.append(a)
        e2.append(b)
    return h, tets, e1, e2


def _inject(coarse_pts, fine_pts):
    dist, idx = cKDTree(fine_pts).query(coarse_pts)
    if np.any(dist > 1e-10):
        raise InputError("coarse nodes are not nested in the reference mesh")
    return idx


def kkt_self_convergence(levels, field, epsilon, *, n_electrodes=198, sigma=1.0,
                         base_subdivisions=3):
    """Errors of the KKT solution on ``levels[:-1]`` against ``levels[-1]``.

    The reference solution is injected onto the coarse nodes (the shell
    meshes are nested) and the difference is measured in the discrete
    ``H1(cortex) x H1(shell)`` norm of the coarse mesh.
    """
    sols = []
    for lev in levels:
        ex = shell_experiment(lev, r_in=field.r_in, r_out=field.r_out, field=field,
                              n_electrodes=n_electrodes, sigma=sigma,
                              base_subdivisions=base_subdivisions)
        res = reconstruct(None, None, None, ex.d_true, epsilon, blocks=ex.blocks)
        sols.append((ex, res))
    ref_ex, ref = sols[-1]
    h, errs, stat = [], [], [ref.stationarity]
    for ex, res in sols[:-1]:
        b = ex.blocks
        iv = _inject(b.mesh.vertices, ref_ex.mesh.vertices)
        isurf = _inject(b.surface.points, ref_ex.blocks.surface.points)
        du = res.u - ref.u[iv]
        df = res.f - ref.f[isurf]
        K = assemble_volume_stiffness(b.mesh)
        mv = nodal_volumes(b.mesh)
        ma = b.lumped_areas()
        err2 = df @ (b.A_core @ df) + ma @ df**2 + du @ (K @ du) + mv @ du**2
        h.append(b.mesh.max_edge_length())
        errs.append(float(np.sqrt(err2)))
        stat.append(res.stationarity)
    return h, errs, stat


def convergence_study(levels, field, *, sigma=1.0, kkt_epsilon=None, kkt_levels=None,
                      n_electrodes=198, base_subdivisions=3, kkt_base_subdivisions=None):
    """Forward h-convergence against ``field`` and optional KKT self-convergence.

    The KKT study may use its own mesh family (``kkt_base_subdivisions``) so
    that its reference level stays affordable.
    """
    levels = list(levels)
    if len(levels) < 3:
        raise ParameterError("need at least three levels")
    h, tets, e1, e2 = forward_convergence(levels, field, sigma=sigma,
                                          base_subdivisions=base_subdivisions)
    table = ConvergenceTable(levels, h, tets, e1, e2, fit_rate(h, e1), fit_rate(h, e2))
    if kkt_epsilon is not None:
        kl = list(kkt_levels or levels)
        if len(kl) < 3:
            raise ParameterError("need at least three KKT levels (the last is the reference)")
        kb = base_subdivisions if kkt_base_subdivisions is None else kkt_base_subdivisions
        kh, ke, stat = kkt_self_convergence(kl, field, kkt_epsilon, n_electrodes=n_electrodes,
                                            sigma=sigma, base_subdivisions=kb)
        table.kkt_levels, table.kkt_h, table.kkt_errors = kl[:-1], kh, ke
        table.kkt_rate = fit_rate(kh, ke)
        table.stationarity = stat
    return table


def smooth_test_field(r_in=0.7, r_out=1.0):
    """Low-degree harmonic field used for convergence studies."""
    c = np.zeros(analytic.n_coefficients(3))
    c[analytic.lm_index(1, 0)] = 1.0
    c[analytic.lm_index(1, 1)] = 0.5
    c[analytic.lm_index(2, -1)] = 0.8
    c[analytic.lm_index(2, 2)] = -0.4
    c[analytic.lm_index(3, 1)] = 0.3
    return analytic.field_from_coefficients(c, r_in, r_out)


__all__ = [
    "ProblemBlocks", "assemble_problem", "reconstruct", "forward_solve", "rmse", "pearson",
    "LeadFieldOracle", "build_lead_field_oracle", "reduced_gradient", "SweepCurve", "sweep_epsilon",
    "convergence_study", "shell_experiment", "default_gamma",
]
