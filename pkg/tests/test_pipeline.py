import numpy as np
import pytest

from eegoc import analytic
from eegoc.errors import CompatibilityError, InputError, ParameterError, ResourceError, UsageError
from eegoc.fem import ConductivityMap, ElectrodeSet, nodal_volumes
from eegoc.mesh import BoundaryTag, project_to_boundary
from eegoc.pipeline import (
    NeumannSolver,
    SweepCurve,
    build_lead_field_oracle,
    fit_rate,
    forward_solve,
    pearson,
    reconstruct,
    reduced_gradient,
    rmse,
    shell_experiment,
    sweep_epsilon,
)
from eegoc.systems import default_gamma


def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0], [0.5, 0.5]) == 0.0
    assert rmse([0.0, 0.0], [1.0, 1.0], [0.5, 0.5]) == pytest.approx(2.0)
    assert rmse([0.0, 0.0], [1.0, -3.0], [1.0, 3.0]) == pytest.approx(1.0)
    with pytest.raises(UsageError):
        rmse([0.0], [0.0], [0.0])
    with pytest.raises(InputError):
        rmse([0.0, 1.0], [0.0], [1.0])


def test_pearson():
    a = np.arange(5.0)
    assert pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    assert pearson(a, np.ones(5)) == 0.0


def test_fit_rate():
    h = np.array([0.4, 0.2, 0.1])
    assert fit_rate(h, 3 * h**2) == pytest.approx(2.0)
    assert np.isnan(fit_rate(h, [1.0, 0.0, 1.0]))


def test_zero_data_gives_zero(experiment0):
    r = reconstruct(None, None, None, np.zeros(len(experiment0.d_true)), 1e-8, blocks=experiment0.blocks)
    assert not np.any(r.f) and not np.any(r.u) and r.residual_norm == 0.0


def test_reconstruct_reports(experiment0):
    d, s = experiment0.noisy(0.01, 0)
    r = reconstruct(None, None, None, d, 1e-8, s=s, blocks=experiment0.blocks)
    assert r.report.relative_residual <= 1e-10
    assert max(r.stationarity) <= 1e-8
    assert r.rmse == pytest.approx(rmse(d, r.predicted, s))
    assert r.epsilon == 1e-8 and r.gamma > 0
    areas = experiment0.blocks.lumped_areas()
    assert abs(areas @ r.f_zero_mean(areas)) < 1e-14 * np.abs(r.f).sum()


def test_reconstruct_without_blocks(shell0):
    e = analytic.electrode_layout_hemisphere(30)
    d = np.linspace(0, 1, 30)
    el = ElectrodeSet(project_to_boundary(e.positions, shell0, BoundaryTag.SCALP), e.weights)
    r = reconstruct(shell0, ConductivityMap.uniform(shell0, 1.0), el, d, 1e-6)
    assert r.u.shape == (shell0.n_nodes,)


def test_forward_solve_zero_source(experiment0):
    b = experiment0.blocks
    u = forward_solve(None, None, np.zeros(b.M), blocks=b)
    assert not np.any(u) and u.shape == (b.N,)


def test_forward_solve_incompatible_source(experiment0):
    b = experiment0.blocks
    f = np.zeros(b.M)
    f[0] = 1.0
    with pytest.raises(CompatibilityError):
        forward_solve(None, None, f, blocks=b)
    with pytest.raises(InputError):
        forward_solve(None, None, np.zeros(b.M + 1), blocks=b)


def test_forward_solve_zero_mean(experiment0, rng):
    b = experiment0.blocks
    areas = b.lumped_areas()
    f = rng.standard_normal(b.M)
    f -= areas @ f / areas.sum()
    u = forward_solve(None, None, f, blocks=b)
    assert abs(nodal_volumes(b.mesh) @ u) < 1e-12 * np.abs(u).max()
    assert np.linalg.norm(b.E @ u - b.B.T @ f) <= 1e-10 * np.linalg.norm(b.B.T @ f)
    u2 = forward_solve(b.mesh, b.cond, f)
    assert np.allclose(u, u2, atol=1e-12 * np.abs(u).max())


def test_oracle_shapes(oracle0, experiment0):
    b = experiment0.blocks
    assert oracle0.L.shape == (len(experiment0.d_true), b.M)
    assert np.array_equal(oracle0.const, b.electrodes.weights)
    # columns annihilate constants: the projection removes the mean
    assert np.abs(oracle0.L @ np.ones(b.M)).max() < 1e-12 * np.abs(oracle0.L).max() * b.M


def test_oracle_single_column(oracle0, experiment0):
    b = experiment0.blocks
    j = 17
    areas = b.lumped_areas()
    e = np.zeros(b.M)
    e[j] = 1.0
    e -= areas[j] / areas.sum()
    u = forward_solve(None, None, e, blocks=b)
    assert np.allclose(oracle0.L[:, j], b.electrodes.weights * (b.Q @ u), atol=1e-12)


def test_oracle_reciprocity(oracle0, experiment0):
    b = experiment0.blocks
    areas = b.lumped_areas()
    solver = NeumannSolver(b.E, nodal_volumes(b.mesh))
    k = [0, 50, 197]
    V = solver.solve(np.asarray((b.Q.T).toarray()[:, k]))
    rows = np.asarray(b.B @ V).T
    P = np.eye(b.M) - np.outer(np.ones(b.M), areas) / areas.sum()
    assert np.allclose(oracle0.L[k], rows @ P, atol=1e-10 * np.abs(oracle0.L).max())


def test_oracle_cap(experiment0):
    with pytest.raises(ResourceError):
        build_lead_field_oracle(None, None, None, blocks=experiment0.blocks, cap=10)


@pytest.mark.parametrize("eps", [1e-6, 1e-8])
def test_tikhonov_matches_kkt(oracle0, experiment0, eps):
    b = experiment0.blocks
    r = reconstruct(None, None, None, experiment0.d_true, eps, blocks=b)
    f, c = oracle0.tikhonov(experiment0.d_true, eps, r.gamma)
    assert np.linalg.norm(r.f - f) / np.linalg.norm(f) < 1e-6
    assert np.linalg.norm(oracle0.gradient(f, c, experiment0.d_true, eps, r.gamma)) < 1e-8 * np.linalg.norm(
        oracle0.L.T @ (b.electrodes.weights * experiment0.d_true))


def test_adjoint_matches_kkt_multiplier(oracle0, experiment0):
    b = experiment0.blocks
    r = reconstruct(None, None, None, experiment0.d_true, 1e-8, blocks=b)
    lam = oracle0.adjoint(r.u, experiment0.d_true)
    assert np.linalg.norm(lam - r.lam) / np.linalg.norm(r.lam) < 1e-8


def test_reduced_gradient_matches_oracle(oracle0, experiment0, rng):
    b = experiment0.blocks
    f = rng.standard_normal(b.M)
    g1 = reduced_gradient(b, f, 0.3, experiment0.d_true, 1e-6)
    g2 = oracle0.gradient(f, 0.3, experiment0.d_true, 1e-6, _gamma(b))
    assert np.linalg.norm(g1 - g2) / np.linalg.norm(g2) < 1e-10


def _gamma(blocks):
    return default_gamma(blocks.A_core)


def test_reduced_gradient_finite_differences(oracle0, experiment0, rng):
    b = experiment0.blocks
    d = experiment0.d_true
    eps, gamma = 1e-6, _gamma(b)
    f = rng.standard_normal(b.M)
    c = 0.1
    g = reduced_gradient(b, f, c, d, eps, gamma)
    for _ in range(3):
        v = rng.standard_normal(b.M + 1)
        h = 1e-4
        jp = oracle0.objective(f + h * v[:-1], c + h * v[-1], d, eps, gamma)
        jm = oracle0.objective(f - h * v[:-1], c - h * v[-1], d, eps, gamma)
        fd = (jp - jm) / (2 * h)
        assert abs(fd - g @ v) <= 1e-7 * max(abs(fd), 1.0)


# --- sweeps --------------------------------------------------------------------------

def test_sweep_validation(experiment0):
    b, d = experiment0.blocks, experiment0.d_true
    for bad in ([], [1e-6, -1.0], [1e-6, 1e-6]):
        with pytest.raises(ParameterError):
            sweep_epsilon(b, d, bad)


def test_sweep_order_and_csv(experiment0):
    d, s = experiment0.noisy(0.05, 2)
    curve = sweep_epsilon(experiment0.blocks, d, [1e-8, 1e-5, 1e-6], s=s)
    assert list(curve.epsilons) == [1e-5, 1e-6, 1e-8]
    assert np.all(np.diff(curve.residual_norms) <= 1e-12)
    text = curve.to_csv().splitlines()
    assert text[0] == "epsilon,residual_norm,rmse"
    assert len(text) == 4
    eps, res, e = text[1].split(",")
    assert float(eps) == 1e-5 and float(res) == curve.residual_norms[0] and float(e) == curve.rmses[0]


def test_sweep_threads_identical(experiment0):
    d, s = experiment0.noisy(0.01, 1)
    a = sweep_epsilon(experiment0.blocks, d, [1e-5, 1e-7], s=s)
    b = sweep_epsilon(experiment0.blocks, d, [1e-5, 1e-7], s=s, threads=2)
    assert np.array_equal(a.rmses, b.rmses)


def test_sweep_curve_helpers():
    c = SweepCurve(np.array([1e-5, 1e-6, 1e-7]), np.ones(3), np.array([3.0, 1.5, 0.8]))
    assert c.first_below() == 1e-7
    assert c.crosses()
    c = SweepCurve(np.array([1e-5]), np.ones(1), np.array([np.nan]))
    assert c.first_below() is None and not c.crosses()


def test_constant_trace_reconstructed_exactly():
    field = analytic.fit_shell_field(lambda p: np.full(len(p), 2.0), 0)
    ex = shell_experiment(0, field=field, n_electrodes=40)
    r = reconstruct(None, None, None, ex.d_true, 1e-8, blocks=ex.blocks)
    assert np.abs(r.predicted - 2.0).max() < 1e-10
    assert np.abs(r.f).max() < 1e-8
    assert rmse(ex.d_true, r.predicted, np.full(40, 0.01)) < 1e-8


def test_experiment_electrodes_on_scalp(experiment0):
    p = experiment0.electrodes.positions
    assert p.shape == (198, 3) and np.all(p[:, 1] > 0)
    r = np.linalg.norm(p, axis=1)
    assert np.all(r <= 1.0 + 1e-12) and np.all(r > 0.95)
