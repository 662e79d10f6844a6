import numpy as np
import pytest

from folrom.basis import FunctionLibrary, ShiftOperator, rotation_shift
from folrom.data import TrajectorySet, translate
from folrom.foliation import Foliation, LossConfig, relative_error
from folrom.linid import LinearSkewModel, fit_linear_model, solve_bundles
from folrom.oracle import random_linear_skew_product
from folrom.optim import (ConstraintError, OptimConfig, check_split, fit_latent_ics, initialize, minimize,
                          minimize_continued, retract, stiefel_tangent)

AUTO = FunctionLibrary.autonomous()


def _generator_problem():
    g = random_linear_skew_product(4, seed=1)
    lib = FunctionLibrary.torus(5)
    data = g.simulate(10, 40, seed=2)
    model = fit_linear_model(data, lib, rotation_shift(lib, g.omega))
    B = solve_bundles(model, data)
    return B, translate(data, model.steady, lib)


def _nonlinear_autonomous(seed=0, n_seg=6, length=25):
    """x' = (0.8 x + 0.3 x y, 0.4 y): the x-leaves are not straight."""
    rng = np.random.default_rng(seed)
    segs = []
    for _ in range(n_seg):
        x = [rng.uniform(-0.5, 0.5, 2)]
        for _ in range(length - 1):
            a, b = x[-1]
            x.append([0.8 * a + 0.3 * a * b, 0.4 * b])
        segs.append(np.array(x))
    n = n_seg * length
    return TrajectorySet(np.vstack(segs), np.zeros((n, 0)), np.arange(n_seg + 1) * length, translated=True)


def test_linear_converges_immediately():
    B, data = _generator_problem()
    fol = initialize(B, [0], data=data)
    out, hist = minimize(fol, data, config=OptimConfig(loss=LossConfig(epsilon=0.05)))
    assert hist.accepted_steps <= 2
    E, _ = relative_error(out, data, LossConfig(epsilon=0.05))
    assert E.max() <= 1e-8


def test_constraint_and_descent_every_step():
    data = _nonlinear_autonomous()
    model = LinearSkewModel.from_nodes(np.diag([0.8, 0.4])[None], AUTO, ShiftOperator.identity(1))
    B = solve_bundles(model, data)
    fol = initialize(B, [0], enc_order=3, map_order=3, data=data)
    out, hist = minimize(fol, data, config=OptimConfig(loss=LossConfig(epsilon=0.05), max_iter=15))
    assert max(hist.constraint) <= 1e-10
    assert np.all(np.diff(hist.L_train) <= 0)
    assert hist.L_train[-1] < 1e-3 * hist.L_train[0]


def test_reducible_summed_constraint():
    B, data = _generator_problem()
    fol = initialize(B, [0], enc_kind="reducible", data=data)
    X = fol.u1.reshape(fol.d_Z, -1)
    assert np.abs(X @ X.T - np.eye(fol.d_Z)).max() <= 1e-12
    out, hist = minimize(fol, data, config=OptimConfig(max_iter=3))
    assert max(hist.constraint) <= 1e-10


def test_collapsed_encoder_rejected():
    fol = Foliation("generic", 1, (0, 1), 3, AUTO)
    fol.u1[:, 0, :] = [[1.0, 0, 0], [1.0, 0, 0]]
    with pytest.raises(ConstraintError, match="orthonormality"):
        check_split([fol])


def test_rank_deficient_split():
    a = Foliation("generic", 1, (0,), 2, AUTO)
    b = Foliation("generic", 1, (1,), 2, AUTO)
    a.u1[0, 0] = [1.0, 0.0]
    b.u1[0, 0] = [1.0, 1e-12]
    b.u1[0, 0] /= np.linalg.norm(b.u1[0, 0])
    with pytest.raises(ConstraintError, match="rank deficient"):
        check_split([a, b])


def test_stiefel_tangent_space():
    X = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 2)))[0].T
    T = stiefel_tangent(X)
    assert T.shape[0] == 2 * 5 - 3
    for D in T:
        S = D @ X.T + X @ D.T
        assert np.abs(S).max() <= 1e-14
    G = T.reshape(len(T), -1) @ T.reshape(len(T), -1).T
    assert np.allclose(G, np.eye(len(T)), atol=1e-14)


def test_retraction_restores_orthonormality():
    fol = Foliation("generic", 1, (0, 1), 4, FunctionLibrary.torus(3))
    fol.u1[:, :, :2] = np.eye(2)[:, None, :]
    d = 0.3 * np.random.default_rng(1).normal(size=fol.u1.size)
    fol.u1 = retract(fol, d)
    assert fol.constraint_residual() <= 1e-14


def test_fit_latent_ics_recovers_exact():
    B, data = _generator_problem()
    fol = initialize(B, [0], data=data)
    ref = fol.latent_ics.copy()
    fol.latent_ics = ref + 0.1
    out = fit_latent_ics(fol, data, ics0=fol.latent_ics)
    assert np.abs(out.latent_ics - ref).max() <= 1e-10


def test_continuation_joins_histories():
    data = _nonlinear_autonomous(n_seg=4)
    B = solve_bundles(LinearSkewModel.from_nodes(np.diag([0.8, 0.4])[None], AUTO, ShiftOperator.identity(1)), data)
    fol = initialize(B, [0], enc_order=2, map_order=2, data=data)
    out, hist = minimize_continued(fol, data, config=OptimConfig(max_iter=3), horizons=(5, None))
    assert hist.step == list(range(len(hist.step)))
    assert out.latent_ics.shape == (4, 1)
