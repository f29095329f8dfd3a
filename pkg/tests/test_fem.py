import math

import numpy as np
import pytest
import scipy.sparse as sp
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_tet_mesh
from eegoc import analytic
from eegoc.errors import AssemblyError, InputError, LocationError, ParseError, UnsupportedFeatureError
from eegoc.fem import (
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
    read_electrodes,
    write_electrodes,
)
from eegoc.mesh import BoundaryTag, SurfaceExtraction, TetMesh, build_shell_mesh, extract_cortex


def symbolic_tet_stiffness():
    x, y, z = sympy.symbols("x y z")
    basis = [1 - x - y - z, x, y, z]
    grads = [[sympy.diff(b, v) for v in (x, y, z)] for b in basis]
    out = sympy.zeros(4, 4)
    for i in range(4):
        for j in range(4):
            integrand = sum(gi * gj for gi, gj in zip(grads[i], grads[j]))
            out[i, j] = sympy.integrate(integrand, (z, 0, 1 - x - y), (y, 0, 1 - x), (x, 0, 1))
    return np.array(out.tolist(), dtype=float)


def symbolic_triangle_mass():
    s, t = sympy.symbols("s t")
    basis = [1 - s - t, s, t]
    out = sympy.zeros(3, 3)
    for i in range(3):
        for j in range(3):
            # reference triangle has area 1/2, the Jacobian is 2 * area
            out[i, j] = 2 * sympy.integrate(basis[i] * basis[j], (t, 0, 1 - s), (s, 0, 1))
    return np.array(out.tolist(), dtype=float)


# --- volume stiffness ---------------------------------------------------------

def test_reference_tet_matches_symbolic_integral():
    E = assemble_volume_stiffness(unit_tet_mesh()).toarray()
    assert np.allclose(E, symbolic_tet_stiffness(), rtol=0, atol=1e-15)
    # node 0 sits opposite the slanted face: its gradient is (-1,-1,-1)
    assert E[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_constants_in_kernel(shell1):
    E = assemble_volume_stiffness(shell1)
    assert np.abs(E @ np.ones(shell1.n_nodes)).max() <= 1e-12 * abs(E).max()


def test_linear_field_energy_is_exact(shell1, rng):
    E = assemble_volume_stiffness(shell1)
    for _ in range(3):
        c = rng.standard_normal(3)
        u = shell1.vertices @ c
        assert u @ E @ u == pytest.approx(c @ c * shell1.volume(), rel=1e-12)


def test_conductivity_scales_stiffness(shell0):
    E1 = assemble_volume_stiffness(shell0)
    E3 = assemble_volume_stiffness(shell0, ConductivityMap.uniform(shell0, 3.0))
    assert abs(E3 - 3.0 * E1).max() <= 1e-14 * abs(E3).max()


def test_stiffness_symmetric_psd_with_one_dim_kernel(shell0):
    E = assemble_volume_stiffness(shell0).toarray()
    assert np.array_equal(E, E.T)
    w = np.linalg.eigvalsh(E)
    assert w[0] > -1e-12 * w[-1]
    assert np.sum(w < 1e-10 * w[-1]) == 1


def test_degenerate_tet_raises():
    m = unit_tet_mesh()
    v = m.vertices.copy()
    v[3] = [0.2, 0.2, 0.0]
    with pytest.raises(AssemblyError, match="tet 0"):
        assemble_volume_stiffness(TetMesh(v, m.tets, m.regions, m.faces, m.face_tags))


def test_missing_region_conductivity(shell0):
    with pytest.raises(InputError):
        assemble_volume_stiffness(shell0, ConductivityMap({99: 1.0}))


def test_nonpositive_conductivity():
    with pytest.raises(InputError):
        ConductivityMap({1: 0.0})


def test_nodal_volumes_sum_to_volume(shell1):
    assert nodal_volumes(shell1).sum() == pytest.approx(shell1.volume(), rel=1e-13)


def test_assembly_is_bit_identical(shell1):
    a = assemble_volume_stiffness(shell1)
    b = assemble_volume_stiffness(shell1)
    assert a.data.tobytes() == b.data.tobytes() and a.indices.tobytes() == b.indices.tobytes()


# --- surface stiffness and mass ---------------------------------------------------

def flat_triangle(p):
    return SurfaceExtraction([[0, 1, 2]], [0, 1, 2], p)


def test_surface_stiffness_constant_and_linear():
    p = np.array([[0.1, 0.0, 0.3], [1.2, 0.4, 0.1], [0.3, 0.9, -0.2]])
    surf = flat_triangle(p)
    A = assemble_surface_stiffness(surf).toarray()
    assert np.abs(A @ np.ones(3)).max() < 1e-14
    n = np.cross(p[1] - p[0], p[2] - p[0])
    n /= np.linalg.norm(n)
    g = np.array([0.7, -1.3, 0.4])
    g -= (g @ n) * n              # surface gradient lies in the plane
    f = p @ g
    assert f @ A @ f == pytest.approx(g @ g * surf.area(), rel=1e-13)


def test_surface_stiffness_converges_on_sphere():
    # int |grad_B y|^2 over the sphere of radius R, by product Gauss rule
    R = 0.7
    T, P, W = analytic.sphere_quadrature(8)
    y = np.sin(T) * np.sin(P)
    exact = R**2 * np.sum(W * (1 - y**2))
    assert exact == pytest.approx(8 * math.pi * R**2 / 3, rel=1e-13)
    errs = []
    for lev in (0, 1, 2):
        surf = extract_cortex(build_shell_mesh(R, 1.0, lev))
        A = assemble_surface_stiffness(surf)
        f = surf.points[:, 1]
        errs.append(abs(f @ A @ f - exact) / exact)
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 5e-3


def test_surface_stiffness_kernel_and_symmetry(shell0):
    A = assemble_surface_stiffness(extract_cortex(shell0))
    dense = A.toarray()
    assert np.array_equal(dense, dense.T)
    assert np.abs(A @ np.ones(A.shape[0])).max() <= 1e-12 * abs(A).max()
    w = np.linalg.eigvalsh(dense)
    assert w[0] > -1e-12 * w[-1] and np.sum(w < 1e-10 * w[-1]) == 1


def test_zero_area_triangle_raises():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(AssemblyError):
        assemble_surface_stiffness(flat_triangle(p))
    with pytest.raises(AssemblyError):
        assemble_surface_mass(flat_triangle(p))


def test_triangle_mass_matches_symbolic_integral():
    p = np.array([[0.0, 0, 0], [2, 0, 0], [0.5, 1.5, 0.3]])
    surf = flat_triangle(p)
    Mf = assemble_surface_mass(surf).toarray()
    assert np.allclose(Mf, surf.area() * symbolic_triangle_mass(), rtol=1e-14)
    assert np.allclose(Mf, surf.area() / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]), rtol=1e-14)


def test_coupling_mass_of_constants(shell1):
    surf = extract_cortex(shell1)
    B = assemble_surface_mass_coupling(surf, shell1)
    assert B.shape == (surf.n_nodes, shell1.n_nodes)
    assert np.ones(surf.n_nodes) @ B @ np.ones(shell1.n_nodes) == pytest.approx(surf.area(), rel=1e-13)
    lumped = np.asarray(B.sum(axis=1)).ravel()
    assert np.allclose(lumped, np.asarray(assemble_surface_mass(surf).sum(axis=1)).ravel())
    cols = np.unique(B.tocoo().col)
    assert set(cols.tolist()) <= set(shell1.boundary_nodes(BoundaryTag.CORTEX).tolist())


def test_coupling_full_row_rank(shell0):
    surf = extract_cortex(shell0)
    B = assemble_surface_mass_coupling(surf, shell0).toarray()
    assert B.shape[0] <= 500
    assert np.linalg.matrix_rank(B) == surf.n_nodes


def test_coupling_mismatch_raises(shell0, shell1):
    with pytest.raises(IndexError):
        assemble_surface_mass_coupling(extract_cortex(shell1), shell0)


# --- observation ------------------------------------------------------------------

def test_electrode_at_vertex_gives_unit_row(shell1):
    idx = [5, 100, 700]
    Q = assemble_observation(shell1, ElectrodeSet(shell1.vertices[idx], np.ones(3))).toarray()
    assert np.array_equal(Q, np.eye(shell1.n_nodes)[idx])


def test_electrode_at_barycenter(shell1):
    t = 123
    x = shell1.vertices[shell1.tets[t]].mean(axis=0)
    Q = assemble_observation(shell1, ElectrodeSet(x[None], [1.0])).toarray()[0]
    assert np.allclose(Q[shell1.tets[t]], 0.25, atol=1e-14)
    assert np.count_nonzero(Q) == 4


def test_affine_fields_reproduced(shell1, rng):
    d = rng.standard_normal((40, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    pts = d * rng.uniform(0.72, 0.97, size=(40, 1))
    Q = assemble_observation(shell1, ElectrodeSet(pts, np.ones(40)))
    c, c0 = rng.standard_normal(3), 0.4
    u = shell1.vertices @ c + c0
    assert np.abs(Q @ u - (pts @ c + c0)).max() < 1e-12
    assert np.abs(np.asarray(Q.sum(axis=1)).ravel() - 1).max() < 1e-14
    assert Q.min() >= 0


def test_electrode_outside_raises(shell1):
    with pytest.raises(LocationError, match="electrode 1"):
        assemble_observation(shell1, ElectrodeSet([[0, 0.8, 0], [0, 1.5, 0]], [1, 1]))


def test_electrode_within_snap_tolerance(shell1):
    x = shell1.vertices[shell1.boundary_nodes(BoundaryTag.SCALP)[0]]
    loc = PointLocator(shell1)
    Q = assemble_observation(shell1, ElectrodeSet(x * (1 + 0.5 * loc.snap_tol), [1.0]), locator=loc)
    assert np.asarray(Q.sum(axis=1)).ravel()[0] == pytest.approx(1.0, abs=1e-14)


def test_duplicate_electrodes_rejected(shell1):
    with pytest.raises(InputError, match="duplicate"):
        assemble_observation(shell1, ElectrodeSet([[0, 0.8, 0], [0, 0.8, 0]], [1, 1]))


def test_electrode_set_validation():
    with pytest.raises(InputError):
        ElectrodeSet([[0, 0, 0]], [0.0])
    with pytest.raises(InputError):
        ElectrodeSet([[0, 0, 0]], [1.0, 2.0])
    with pytest.raises(InputError):
        ElectrodeSet(np.empty((0, 3)), [])


def test_electrode_file_round_trip(tmp_path, rng):
    e = ElectrodeSet(rng.standard_normal((7, 3)), rng.uniform(0.5, 2, 7))
    p = tmp_path / "e.txt"
    write_electrodes(e, p)
    back = read_electrodes(p)
    assert back.positions.tobytes() == e.positions.tobytes()
    assert back.weights.tobytes() == e.weights.tobytes()


def test_electrode_file_errors(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("# comment\n0 0 1 1\n0 1 x 1\n")
    with pytest.raises(ParseError) as err:
        read_electrodes(p)
    assert err.value.line == 3


# --- data blocks --------------------------------------------------------------------

def test_node_electrodes_give_diagonal_G(shell1):
    idx = np.array([3, 50, 400, 900])
    e = ElectrodeSet(shell1.vertices[idx], np.ones(4))
    Q = assemble_observation(shell1, e)
    G, r = assemble_data_blocks(Q, e, np.zeros(4))
    G = G.toarray()
    expected = np.zeros(shell1.n_nodes)
    expected[idx] = 1.0
    assert np.array_equal(G, np.diag(expected))
    assert not np.any(r)


def test_data_blocks_match_dense(rng):
    Q = sp.csr_matrix(rng.uniform(size=(3, 10)) * (rng.uniform(size=(3, 10)) < 0.5))
    w = rng.uniform(0.5, 2.0, 3)
    d = rng.standard_normal(3)
    G, r = assemble_data_blocks(Q, ElectrodeSet(np.eye(3), w), d)
    Qd = Q.toarray()
    W = np.diag(w)
    assert np.allclose(G.toarray(), Qd.T @ W.T @ W @ Qd, rtol=1e-14, atol=1e-15)
    assert np.allclose(r, Qd.T @ W.T @ W @ d, rtol=1e-14, atol=1e-15)


def test_G_rank_at_most_K(experiment0):
    b = experiment0.blocks
    G, _ = assemble_data_blocks(b.Q, b.electrodes, experiment0.d_true)
    assert np.linalg.matrix_rank(G.toarray()) <= b.electrodes.count


def test_dense_precision_unsupported(experiment0):
    b = experiment0.blocks
    K = b.electrodes.count
    with pytest.raises(UnsupportedFeatureError):
        assemble_data_blocks(b.Q, b.electrodes, np.zeros(K), precision=np.eye(K))


def test_data_block_dimension_mismatch(experiment0):
    b = experiment0.blocks
    with pytest.raises(InputError):
        assemble_data_blocks(b.Q, b.electrodes, np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_G_is_symmetric_psd(experiment0, seed):
    b = experiment0.blocks
    G, _ = assemble_data_blocks(b.Q, b.electrodes, experiment0.d_true)
    X = np.random.default_rng(seed).standard_normal((G.shape[0], 400))
    assert abs(G - G.T).max() == 0
    q = np.einsum("ij,ij->j", X, G @ X)
    assert q.min() >= -1e-14 * np.abs(q).max()
