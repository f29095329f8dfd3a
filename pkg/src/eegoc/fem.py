"""
P1 finite-element matrices for the reconstruction system.

All element integrals are exact for piecewise-linear functions, so no
quadrature error enters the assembled matrices.  Matrices are returned as
``scipy.sparse`` CSR matrices with summed duplicates; the element loop is
vectorised and its summation order is fixed, so identical inputs give
bit-identical matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import AssemblyError, InputError, LocationError, ParseError, UnsupportedFeatureError
from .mesh import DEGENERATE_REL_VOLUME

SNAP_REL_TOL = 1e-8


class ConductivityMap(dict):
    """Mapping ``region id -> conductivity`` (S/m), all values strictly positive."""

    def __init__(self, values):
        super().__init__({int(k): float(v) for k, v in dict(values).items()})
        bad = {k: v for k, v in self.items() if not v > 0}
        if bad:
            raise InputError(f"conductivities must be positive: {bad}")

    @classmethod
    def uniform(cls, mesh, sigma=1.0):
        return cls({r: sigma for r in mesh.region_ids()})

    def per_tet(self, mesh):
        missing = sorted(set(mesh.region_ids()) - set(self))
        if missing:
            raise InputError(f"no conductivity for regions {missing}")
        lut = np.zeros(max(max(self), int(mesh.regions.max())) + 1)
        for k, v in self.items():
            if k >= 0:
                lut[k] = v
        return lut[mesh.regions]


@dataclass(frozen=True, eq=False)
class ElectrodeSet:
    """Electrode positions with positive weights (inverse noise standard deviations)."""

    positions: np.ndarray
    weights: np.ndarray
    host_tets: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != len(pos):
            raise InputError("one weight per electrode is required")
        if len(pos) == 0:
            raise InputError("electrode set is empty")
        if not np.all(np.isfinite(pos)):
            raise InputError("electrode positions must be finite")
        if not np.all(w > 0):
            raise InputError("electrode weights must be strictly positive")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def count(self):
        return len(self.positions)

    def check_distinct(self, tol):
        """Raise if two electrodes are closer than ``tol``."""
        pairs = cKDTree(self.positions).query_pairs(tol)
        if pairs:
            i, j = sorted(pairs)[0]
            raise InputError(f"electrodes {i} and {j} are duplicates (closer than {tol:g})")

    def with_weights(self, weights):
        return ElectrodeSet(self.positions, weights, self.host_tets)


def read_electrodes(path):
    """Parse an electrode file: one ``x y z w`` line per electrode, ``#`` comments."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != 4:
            raise ParseError("expected 'x y z w'", n)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError("non-numeric field", n) from None
    if not rows:
        raise ParseError("no electrodes in file", 1)
    a = np.array(rows)
    return ElectrodeSet(a[:, :3], a[:, 3])


def write_electrodes(electrodes, path):
    lines = ["# x y z w"]
    lines += [f"{x!r} {y!r} {z!r} {w!r}" for (x, y, z), w in
              zip(electrodes.positions.tolist(), electrodes.weights.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# geometry helpers
# --------------------------------------------------------------------------

def tet_gradients(mesh):
    """Gradients of the four barycentric functions and the volume of each tet.

    Returns
    -------
    grads : (T, 4, 3) array
    volumes : (T,) array
    """
    p = mesh.vertices[mesh.tets]
    d = p[:, 1:] - p[:, :1]
    det = np.linalg.det(d)
    tiny = DEGENERATE_REL_VOLUME * mesh.diameter() ** 3 * 6.0
    bad = np.nonzero(np.abs(det) < tiny)[0]
    if len(bad):
        raise AssemblyError(f"tet {bad[0]} is degenerate (volume {det[bad[0]] / 6:.3e})")
    g = np.empty((mesh.n_tets, 4, 3))
    # rows of (D^T)^-1 are the gradients of barycentric coordinates 1..3
    g[:, 1:] = np.linalg.inv(np.transpose(d, (0, 2, 1)))
    g[:, 0] = -g[:, 1:].sum(axis=1)
    return g, np.abs(det) / 6.0


def _scatter_sym(conn, local, n):
    # sum only the (row <= col) triplets and mirror them, so that the result
    # is symmetric bit for bit regardless of summation order
    k = conn.shape[1]
    rows = np.repeat(conn, k, axis=1).ravel()
    cols = np.tile(conn, (1, k)).ravel()
    vals = local.ravel()
    keep = rows <= cols
    upper = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    return (upper + sp.triu(upper, k=1).T).tocsr()


def assemble_volume_stiffness(mesh, cond=None):
    """Stiffness matrix of ``int sigma grad(u) . grad(v) dV`` (N x N).

    ``cond`` may be a :class:`ConductivityMap`; ``None`` means sigma = 1.
    """
    g, vol = tet_gradients(mesh)
    sigma = np.ones(mesh.n_tets) if cond is None else ConductivityMap(cond).per_tet(mesh)
    local = np.einsum("tid,tjd->tij", g, g) * (sigma * vol)[:, None, None]
    return _scatter_sym(mesh.tets, local, mesh.n_nodes)


def nodal_volumes(mesh):
    """Lumped volume mass: ``int alpha_i dV`` for every node."""
    vol = np.abs(mesh.signed_volumes())
    return np.bincount(mesh.tets.ravel(), weights=np.repeat(vol / 4.0, 4), minlength=mesh.n_nodes)


def _triangle_geometry(points, triangles):
    p = points[triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    g11 = np.einsum("ij,ij->i", e1, e1)
    g12 = np.einsum("ij,ij->i", e1, e2)
    g22 = np.einsum("ij,ij->i", e2, e2)
    det = g11 * g22 - g12**2
    return e1, e2, g11, g12, g22, det


def assemble_surface_stiffness(surf):
    """Unscaled Laplace-Beltrami stiffness ``int grad_B f . grad_B phi dS`` (M x M)."""
    e1, e2, g11, g12, g22, det = _triangle_geometry(surf.points, surf.triangles)
    scale = max(float(np.max(g11)), 1e-300)
    bad = np.nonzero(det <= 1e-24 * scale**2)[0]
    if len(bad):
        raise AssemblyError(f"surface triangle {bad[0]} has zero area")
    # in-plane gradients of the barycentric functions: [e1 e2] G^-1
    inv11, inv12, inv22 = g22 / det, -g12 / det, g11 / det
    grad1 = inv11[:, None] * e1 + inv12[:, None] * e2
    grad2 = inv12[:, None] * e1 + inv22[:, None] * e2
    g = np.stack([-grad1 - grad2, grad1, grad2], axis=1)
    area = 0.5 * np.sqrt(det)
    local = np.einsum("tid,tjd->tij", g, g) * area[:, None, None]
    return _scatter_sym(surf.triangles, local, surf.n_nodes)


_P1_TRI_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_surface_mass(surf):
    """Consistent P1 mass matrix of the cortical triangulation (M x M)."""
    area = surf.areas()
    if np.any(area <= 0):
        raise AssemblyError(f"surface triangle {int(np.argmin(area))} has zero area")
    local = area[:, None, None] * _P1_TRI_MASS[None]
    return _scatter_sym(surf.triangles, local, surf.n_nodes)


def assemble_surface_mass_coupling(surf, mesh):
    """Coupling ``B_ij = int_cortex beta_i alpha_j dS`` (M x N).

    Row ``i`` tests the control basis function ``beta_i`` against the trace
    of the volume basis function ``alpha_j``; the traces of the volume basis
    on the cortex coincide with the surface basis, so ``B`` is the surface
    mass matrix scattered into the columns ``surf_to_vol``.
    """
    s2v = surf.surf_to_vol
    if s2v.size and (s2v.min() < 0 or s2v.max() >= mesh.n_nodes):
        raise IndexError("surface node maps outside the volume mesh")
    if not np.array_equal(mesh.vertices[s2v], surf.points):
        raise IndexError("surface points do not match the mapped volume nodes")
    mf = assemble_surface_mass(surf).tocoo()
    return sp.coo_matrix((mf.data, (mf.row, s2v[mf.col])), shape=(surf.n_nodes, mesh.n_nodes)).tocsr()


# --------------------------------------------------------------------------
# point location and observation
# --------------------------------------------------------------------------

class PointLocator:
    """Find host tetrahedra and barycentric coordinates of points.

    Points outside the mesh by at most ``snap_tol`` are accepted and get the
    coordinates of the closest point of their best host element.
    """

    def __init__(self, mesh, snap_tol=None, candidates=32):
        self.mesh = mesh
        self.snap_tol = SNAP_REL_TOL * mesh.diameter() if snap_tol is None else snap_tol
        p = mesh.vertices[mesh.tets]
        self._origin = p[:, 0]
        self._inv = np.linalg.inv(np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1)))
        self._tree = cKDTree(p.mean(axis=1))
        self._k = min(candidates, mesh.n_tets)

    def _bary(self, x, tets):
        lam = np.einsum("tij,tj->ti", self._inv[tets], x - self._origin[tets])
        return np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)

    def _best(self, x, tets):
        b = self._bary(x, tets)
        k = int(np.argmax(b.min(axis=1)))
        return tets[k], b[k]

    def locate_one(self, x):
        x = np.asarray(x, dtype=np.float64)
        _, near = self._tree.query(x, k=self._k)
        tet, b = self._best(x, np.atleast_1d(near))
        if b.min() < -1e-12:
            tet2, b2 = self._best(x, np.arange(self.mesh.n_tets))
            if b2.min() > b.min():
                tet, b = tet2, b2
        if b.min() < 0:
            clipped = np.clip(b, 0.0, None)
            clipped /= clipped.sum()
            y = clipped @ self.mesh.vertices[self.mesh.tets[tet]]
            if np.linalg.norm(x - y) > self.snap_tol:
                return None, None
            b = clipped
        b = np.where(np.abs(b) < 1e-12, 0.0, b)
        return int(tet), b / b.sum()

    def locate(self, points):
        """Return host tets (K,) and barycentric weights (K, 4); ``LocationError`` on failure."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tets = np.empty(len(points), dtype=np.int64)
        bary = np.empty((len(points), 4))
        for i, x in enumerate(points):
            t, b = self.locate_one(x)
            if t is None:
                raise LocationError(f"electrode {i} at {x.tolist()} lies outside the mesh")
            tets[i], bary[i] = t, b
        return tets, bary

    def interpolate(self, values, points):
        tets, bary = self.locate(points)
        return np.einsum("ki,ki->k", bary, np.asarray(values)[self.mesh.tets[tets]])


def assemble_observation(mesh, electrodes, locator=None):
    """Pointwise evaluation matrix ``Q`` (K x N) built from barycentric weights."""
    locator = locator or PointLocator(mesh)
    electrodes.check_distinct(locator.snap_tol)
    tets, bary = locator.locate(electrodes.positions)
    k = electrodes.count
    rows = np.repeat(np.arange(k), 4)
    cols = mesh.tets[tets].ravel()
    q = sp.coo_matrix((bary.ravel(), (rows, cols)), shape=(k, mesh.n_nodes)).tocsr()
    q.eliminate_zeros()
    return q


def assemble_data_blocks(Q, electrodes, d, precision=None):
    """Data blocks ``G = Q^T W^T W Q`` and ``r = Q^T W^T W d``.

    ``precision`` is the extension point for a dense noise precision matrix
    in place of ``W^T W``; only the diagonal weighting is implemented.
    """
    if precision is not None:
        raise UnsupportedFeatureError("dense noise covariance weighting is not implemented")
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    if Q.shape[0] != electrodes.count or len(d) != electrodes.count:
        raise InputError(f"dimension mismatch: Q has {Q.shape[0]} rows, "
                         f"{electrodes.count} electrodes, {len(d)} data")
    if not np.all(np.isfinite(d)):
        raise InputError("data vector must be finite")
    w2 = electrodes.weights**2
    wq = sp.diags(w2) @ Q
    G = Q.T @ wq
    G = ((G + G.T) * 0.5).tocsr()
    r = Q.T @ (w2 * d)
    return G, np.asarray(r).reshape(-1)
