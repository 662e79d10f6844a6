import numpy as np
import pytest

from folrom.basis import FunctionLibrary, ShiftOperator, rotation_shift
from folrom.data import TrajectorySet, translate
from folrom.linid import (DeadModeError, LinearSkewModel, SteadyStateError, check_nonresonance, dmd_direct, dmd_fit,
                          fit_linear_model, solve_bundles, spectral_quotient)
from folrom.oracle import benchmark, equation_bundles, random_linear_skew_product

AUTO = FunctionLibrary.autonomous()
ID1 = ShiftOperator.identity(1)


def _diag_bundles(values):
    """Autonomous bundle set with the given (real) eigenvalues."""
    A = np.diag(values).astype(float)
    model = LinearSkewModel.from_nodes(A[None], AUTO, ID1)
    return solve_bundles(model)


def _affine_data(M, b, n_traj=6, length=30, seed=0):
    rng = np.random.default_rng(seed)
    segs = []
    for _ in range(n_traj):
        x = [rng.normal(size=len(b))]
        for _ in range(length - 1):
            x.append(M @ x[-1] + b)
        segs.append(TrajectorySet(np.array(x), np.zeros((length, 0)), [0, length]))
    return TrajectorySet.concat(segs)


def _stable_matrix(d, seed, radius=0.9):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    return radius * M / np.abs(np.linalg.eigvals(M)).max()


# ---------------------------------------------------------------- DMD


def test_dmd_exact_linear():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 4))
    X = rng.normal(size=(4, 20))
    res = dmd_fit(X, M @ X)
    assert np.abs(res.A - M).max() <= 1e-10
    assert np.abs(res.left_eigvecs @ M - res.eigvals[:, None] * res.left_eigvecs).max() <= 1e-10


def test_dmd_identity():
    X = np.random.default_rng(1).normal(size=(3, 10))
    assert np.allclose(dmd_fit(X, X).eigvals, 1.0, atol=1e-12)


def test_dmd_rotation_on_unit_circle():
    phi = 0.4
    R = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    X = np.random.default_rng(2).normal(size=(2, 10))
    lam = dmd_fit(X, R @ X).eigvals
    assert np.allclose(np.abs(lam), 1.0, atol=1e-10)
    assert np.allclose(sorted(np.angle(lam)), [-phi, phi], atol=1e-10)


def test_dmd_defective_warns():
    J = np.array([[0.5, 1.0], [0.0, 0.5]])
    X = np.random.default_rng(3).normal(size=(2, 10))
    with pytest.warns(UserWarning):
        res = dmd_fit(X, J @ X)
    assert not res.semisimple


def test_dmd_direct_full_dimension():
    M = _stable_matrix(4, 4)
    X = np.random.default_rng(5).normal(size=(4, 30))
    A, V, info = dmd_direct(X, M @ X, 4)
    assert np.allclose(np.sort_complex(np.linalg.eigvals(A)), np.sort_complex(np.linalg.eigvals(M)), atol=1e-8)


def test_dmd_direct_one_real_mode():
    rng = np.random.default_rng(6)
    T = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    M = T @ np.diag([0.95, 0.3, 0.2]) @ T.T
    X = rng.normal(size=(3, 40))
    A, V, info = dmd_direct(X, M @ X, 1)
    assert info["converged"]
    assert np.isclose(A[0, 0], 0.95, atol=1e-8)


def test_dmd_direct_stationary_at_optimum():
    rng = np.random.default_rng(7)
    T = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    M = T @ np.diag([0.9, 0.7, 0.5, 0.2]) @ T.T
    X = rng.normal(size=(4, 40))
    A, V, info = dmd_direct(X, M @ X, 2, V0=T[:, :2].T)
    assert info["objective"] <= 1e-20
    assert info["iterations"] == 0


# ---------------------------------------------------------------- linear model


def test_fit_autonomous_affine():
    M = _stable_matrix(3, 8)
    b = np.array([0.3, -0.2, 0.5])
    model = fit_linear_model(_affine_data(M, b), AUTO, ID1)
    assert np.abs(model.A[:, 0, :] - M).max() <= 1e-8
    assert np.abs(model.steady[:, 0] - np.linalg.solve(np.eye(3) - M, b)).max() <= 1e-8
    assert model.steady_residual() <= 1e-8


def test_fit_constant_trajectories():
    c = np.array([1.5, -0.5])
    segs = []
    rng = np.random.default_rng(9)
    M = _stable_matrix(2, 9)
    for k in range(4):
        x = [rng.normal(size=2)]
        for _ in range(20):
            x.append(M @ (x[-1] - c) + c)
        segs.append(TrajectorySet(np.array(x), np.zeros((21, 0)), [0, 21]))
    model = fit_linear_model(TrajectorySet.concat(segs), AUTO, ID1)
    assert np.abs(model.steady[:, 0] - c).max() <= 1e-10


def test_fit_forced_generator_steady():
    g = random_linear_skew_product(4, seed=1)
    lib = FunctionLibrary.torus(5)
    model = fit_linear_model(g.simulate(10, 40, seed=2), lib, rotation_shift(lib, g.omega))
    assert np.abs(model.steady_at(lib(0.3)) - g.s0).max() <= 1e-8
    assert model.steady_residual() <= 1e-8


def test_singular_steady_state():
    model_A = np.eye(2)[:, None, :]
    with pytest.raises(SteadyStateError, match="collides with spectrum of Omega"):
        LinearSkewModel(model_A, np.ones((2, 1)), AUTO, ID1)


# ---------------------------------------------------------------- bundles


def test_autonomous_bundles_are_left_eigenvectors():
    M = _stable_matrix(4, 10)
    model = LinearSkewModel.from_nodes(M[None], AUTO, ID1)
    B = solve_bundles(model)
    lam, V = B.eigvals, B.eigvecs[:, 0, :]
    assert np.abs(V @ M - lam[:, None] * V).max() <= 1e-10
    ref = dmd_fit(np.eye(4), M).eigvals
    assert np.allclose(np.sort_complex(lam), np.sort_complex(ref), atol=1e-8)


def test_sorting_and_pairs():
    M = _stable_matrix(5, 11)
    B = solve_bundles(LinearSkewModel.from_nodes(M[None], AUTO, ID1))
    c = B.n_complex
    lam = B.eigvals
    for k in range(0, c, 2):
        assert np.isclose(lam[k], np.conj(lam[k + 1]))
        assert lam[k].imag > 0
    mags_c = np.abs(lam[:c:2])
    mags_r = np.abs(lam[c:])
    assert np.all(np.diff(mags_c) <= 1e-12) and np.all(np.diff(mags_r) <= 1e-12)
    for j, rows in enumerate(B.bundle_rows):
        ev = np.linalg.eigvals(B.blocks[j][0])
        assert np.allclose(np.sort_complex(ev), np.sort_complex(lam[rows]), atol=1e-12)


def test_constant_matrix_on_torus():
    M = _stable_matrix(3, 12)
    lib = FunctionLibrary.torus(5)
    model = LinearSkewModel.from_nodes(np.repeat(M[None], 5, axis=0), lib, rotation_shift(lib, 0.7))
    B = solve_bundles(model)
    assert np.allclose(np.sort_complex(B.eigvals), np.sort_complex(np.linalg.eigvals(M)), atol=1e-8)
    assert B.diagnostics["bundle_residual"] <= 1e-8


def test_forced_generator_bundles():
    g = random_linear_skew_product(4, seed=1)
    lib = FunctionLibrary.torus(5)
    data = g.simulate(10, 40, seed=2)
    model = fit_linear_model(data, lib, rotation_shift(lib, g.omega))
    B = solve_bundles(model, data)
    assert np.allclose(np.sort_complex(B.eigvals), np.sort_complex(g.eigvals), atol=1e-8)
    al = lib(lib.nodes[:, 0])
    I = np.einsum("nij,njk->nik", B.breve_U_at(al), B.breve_W_at(al))
    assert np.abs(I - np.eye(4)).max() <= 1e-10
    xb = np.einsum("nij,nj->ni", B.breve_U_at(data.alphas(lib)), translate(data, model.steady, lib).states)
    assert np.abs(xb).max() <= 1 + 1e-12
    assert np.all(B.scales > 0)


def test_parametric_bundles_pointwise():
    lib = FunctionLibrary.interval(5, 0.4, 0.6)
    p = lib.nodes[:, 0]
    A = np.array([[[0.9 * np.cos(q), -0.9 * np.sin(q), 0], [0.9 * np.sin(q), 0.9 * np.cos(q), 0],
                   [0, 0, 0.3 + 0.5 * q]] for q in p])
    B = solve_bundles(LinearSkewModel.from_nodes(A, lib, ShiftOperator.identity(5)))
    assert np.allclose(B.bundle_eigvals[0], 0.9 * np.exp(1j * p), atol=1e-12)
    assert np.allclose(B.bundle_eigvals[1].real, 0.3 + 0.5 * p, atol=1e-12)


def test_dead_mode():
    M = np.diag([0.9, 0.5])
    data = _affine_data(M, np.zeros(2), 3, 10)
    data = TrajectorySet(data.states * [1.0, 0.0], data.forcing, data.boundaries)
    model = LinearSkewModel.from_nodes(M[None], AUTO, ID1)
    with pytest.raises(DeadModeError, match="mode coordinate 1"):
        solve_bundles(model, data)


def test_car_following_bundle_eigenvalues():
    dt = 0.5
    B = equation_bundles(benchmark("car-following"), 1, dt)
    lam = B.continuous(dt)
    assert np.isclose(lam[0].real, -0.0163, atol=1e-3)
    assert np.isclose(abs(lam[0].imag), 0.4971, atol=1e-3)


# ---------------------------------------------------------------- spectral quotient and resonances


def test_quotient_car_following():
    B = equation_bundles(benchmark("car-following"), 1, 0.5)
    assert np.isclose(spectral_quotient(B, [0]), 1.0)
    assert abs(spectral_quotient(B, [1, 2, 3, 4]) - 45.993) <= 0.5


def test_quotient_all_equal():
    assert np.isclose(spectral_quotient(_diag_bundles([0.7, 0.7, 0.7]), [1]), 1.0)


def test_quotient_zero_eigenvalue():
    B = _diag_bundles([0.7, 0.0])
    with pytest.raises(ValueError, match="alpha_j = 0"):
        spectral_quotient(B, [1])


def test_nonresonance_single_mode():
    rep = check_nonresonance(_diag_bundles([0.5]), [0])
    assert not rep.external and not rep.internal


def test_resonance_flagged():
    # bundles sorted by magnitude: 0 -> 0.9, 1 -> 0.81; 0.81^-1 * 0.9 * 0.9 = 1
    rep = check_nonresonance(_diag_bundles([0.9, 0.81]), [1])
    assert np.isclose(rep.quotient, 2.0)
    assert (1, (0, 0)) in rep.external
    assert rep.resonant


def test_empty_order_range():
    r = 0.99
    M = r * np.array([[np.cos(0.4), -np.sin(0.4)], [np.sin(0.4), np.cos(0.4)]])
    B = solve_bundles(LinearSkewModel.from_nodes(M[None], AUTO, ID1))
    rep = check_nonresonance(B, [0])
    assert rep.quotient == 1.0 and rep.max_order == 1
    assert not rep.external and not rep.internal


def test_order_cap_truncates():
    B = _diag_bundles([0.99, 0.5])
    rep = check_nonresonance(B, [1], order_cap=3)
    assert rep.truncated and rep.max_order == 3
