import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from folrom.basis import FunctionLibrary, ShiftOperator, rotation_shift
from folrom.data import TrajectorySet
from folrom.foliation import (DivergenceError, Foliation, LossConfig, eval_encoder, iterate_map, loss,
                              loss_and_grad, prepare, relative_error, rotate_latent, sigma_eps)

AUTO = FunctionLibrary.autonomous()


def _random_foliation(kind="generic", d_X=4, coords=(0, 1), n_Y=3, enc_order=3, map_order=3, seed=0):
    rng = np.random.default_rng(seed)
    lib = FunctionLibrary.torus(n_Y) if n_Y > 1 else AUTO
    fol = Foliation(kind, enc_order, coords, d_X, lib, map_order=map_order)
    fol.u1 = rng.normal(size=fol.u1.shape)
    fol.unl = 0.1 * rng.normal(size=fol.unl.shape)
    fol.R = 0.3 * rng.normal(size=fol.R.shape)
    return fol


def _forced_data(d_X=4, n_seg=3, length=6, seed=1, omega=0.7):
    rng = np.random.default_rng(seed)
    x = 0.3 * rng.normal(size=(n_seg * length, d_X))
    th = np.concatenate([rng.uniform(0, 2 * np.pi) + omega * np.arange(length) for _ in range(n_seg)])
    return TrajectorySet(x, th, np.arange(n_seg + 1) * length, translated=True)


# ---------------------------------------------------------------- weight


def test_sigma_reference_values():
    assert sigma_eps(0.0, 0.3) == 1.0
    assert sigma_eps(0.3, 0.3) == pytest.approx(0.5, abs=1e-15)
    assert sigma_eps(0.9, 0.3) == pytest.approx(1 / 6, abs=1e-15)


@given(st.floats(1e-3, 10.0))
def test_sigma_continuous_at_eps(eps):
    lo = sigma_eps(eps * (1 - 1e-12), eps)
    hi = sigma_eps(eps * (1 + 1e-12), eps)
    assert abs(lo - hi) <= 1e-10
    assert abs(sigma_eps(eps, eps) - 0.5) <= 1e-15


# ---------------------------------------------------------------- encoder and map


def test_encoder_zero_at_origin():
    fol = _random_foliation()
    al = FunctionLibrary.torus(3)(1.1)
    z = eval_encoder(fol, np.zeros(4), np.zeros(2), al)
    assert np.abs(z).max() == 0.0


def test_generic_encoder_linear_on_leaf():
    # with x_perp = 0 the generic encoder reduces to its linear part
    fol = _random_foliation()
    al = FunctionLibrary.torus(3)(0.4)
    xb = np.array([0.5, -0.3, 0.0, 0.0])
    z = eval_encoder(fol, xb, np.zeros(2), al)
    lin = np.einsum("ijk,j,k->i", fol.u1, al, xb)
    assert np.allclose(z, lin, atol=1e-15)


def test_encoder_dimension_mismatch():
    fol = _random_foliation()
    with pytest.raises(ValueError, match="dimension mismatch"):
        eval_encoder(fol, np.zeros(3), np.zeros(2), np.ones(3))


def test_feature_sets():
    g = Foliation("generic", 3, (0,), 2, AUTO)
    loc = Foliation("local", 3, (0,), 2, AUTO)
    red = Foliation("reducible", 3, (0,), 2, AUTO)
    # generic: every monomial of degree 2..3 touching x_1
    assert sorted(map(tuple, g.feat_exps)) == sorted([(1, 1), (0, 2), (2, 1), (1, 2), (0, 3)])
    assert sorted(map(tuple, loc.feat_exps)) == [(0, 2), (0, 3)]
    assert len(red.feat_exps) == 7


def test_iterate_zero_steps():
    fol = _random_foliation()
    z0 = np.array([0.1, 0.2])
    assert np.array_equal(iterate_map(fol, z0, np.ones(3) / 3, ShiftOperator.identity(3), 0), z0)


def test_iterate_linear_power():
    fol = Foliation("generic", 1, (0, 1), 2, AUTO)
    L = np.array([[0.8, -0.3], [0.3, 0.8]])
    fol.R[:, :, 0] = L
    z = iterate_map(fol, [1.0, 0.5], [1.0], ShiftOperator.identity(1), 7)
    assert np.allclose(z, np.linalg.matrix_power(L, 7) @ [1.0, 0.5], atol=1e-14)


def test_iterate_cubic():
    fol = Foliation("generic", 1, (0,), 1, AUTO, map_order=3)
    fol.R[0, :, 0] = [0.9, 0.2, -0.3]
    r = lambda z: 0.9 * z + 0.2 * z**2 - 0.3 * z**3
    z = iterate_map(fol, [0.5], [1.0], ShiftOperator.identity(1), 2)
    assert z[0] == pytest.approx(r(r(0.5)), abs=1e-15)


def test_iterate_forced_advances_phase():
    lib = FunctionLibrary.torus(5)
    sh = rotation_shift(lib, 0.9)
    fol = Foliation("generic", 1, (0,), 1, lib)
    fol.R[0, 0, :] = 0.5 + 0.1 * np.cos(lib.nodes[:, 0])
    z, th = 1.0, 0.2
    for _ in range(4):
        z *= 0.5 + 0.1 * np.cos(th)
        th += 0.9
    assert iterate_map(fol, [1.0], lib(0.2), sh, 4)[0] == pytest.approx(z, abs=1e-12)


def test_divergence():
    fol = Foliation("generic", 1, (0,), 1, AUTO)
    fol.R[0, 0, 0] = 10.0
    with pytest.raises(DivergenceError) as e:
        iterate_map(fol, [1.0], [1.0], ShiftOperator.identity(1), 20, guard=1e6)
    assert e.value.step == 7


# ---------------------------------------------------------------- loss


def _linear_data(lams, n_seg=4, length=20, seed=0):
    rng = np.random.default_rng(seed)
    segs = []
    for _ in range(n_seg):
        x0 = rng.normal(size=len(lams))
        x = x0 * np.power.outer(lams, np.arange(length)).T
        segs.append(x)
    return TrajectorySet(np.vstack(segs), np.zeros((n_seg * length, 0)), np.arange(n_seg + 1) * length,
                         translated=True)


def test_loss_zero_on_exact_foliation():
    data = _linear_data([0.9, 0.5, 0.3])
    fol = Foliation("generic", 1, (0,), 3, AUTO)
    fol.u1[0, 0, 0] = 1.0
    fol.R[0, 0, 0] = 0.9
    L, per = loss(fol, data, LossConfig(epsilon=0.1))
    assert L <= 1e-28
    E, _ = relative_error(fol, data, LossConfig(epsilon=0.1))
    assert E.max() <= 1e-12


def test_loss_gradient_matches_finite_differences():
    fol = _random_foliation()
    data = _forced_data()
    cfg = LossConfig(epsilon=0.2)
    prep = prepare(fol, data, cfg)
    fol.latent_ics = 0.1 * np.random.default_rng(3).normal(size=(data.n_segments, 2))
    L0, g = loss_and_grad(fol, data, cfg, prep)
    p0 = fol.get_params()
    h = 1e-6
    fd = np.empty_like(p0)
    for i in range(p0.size):
        d = np.zeros_like(p0)
        d[i] = h
        fp = loss(fol.copy().set_params(p0 + d), data, cfg, prep)[0]
        fm = loss(fol.copy().set_params(p0 - d), data, cfg, prep)[0]
        fd[i] = (fp - fm) / (2 * h)
    assert np.abs(fd - g).max() / max(np.abs(g).max(), 1.0) <= 1e-6


def test_relative_error_branches():
    eps = 0.4
    x = np.array([[1.0], [0.2], [1.0], [0.8]])
    data = TrajectorySet(x, np.zeros((4, 0)), [0, 2, 4], translated=True)
    fol = Foliation("generic", 1, (0,), 1, AUTO)
    fol.u1[0, 0, 0] = 1.0  # r = 0 so the one-step error is |x_1|
    E, norms = relative_error(fol, data, LossConfig(epsilon=eps))
    assert E[0] == 0.0 and E[2] == 0.0
    assert E[1] == pytest.approx(1.0 / (1 + 2 * 0.125 - 0.0625), abs=1e-14)  # |x| = eps/2
    assert E[3] == pytest.approx(1.0, abs=1e-14)  # large branch: 2/eps * eps/(2|x|) * |x|


def test_horizon_windows():
    data = _linear_data([0.9, 0.5], n_seg=2, length=10)
    fol = Foliation("generic", 1, (0,), 2, AUTO)
    prep = prepare(fol, data, LossConfig(max_horizon=4))
    assert list(prep.boundaries) == [0, 4, 8, 10, 14, 18, 20]


def test_loss_requires_translated():
    data = _linear_data([0.9])
    fol = Foliation("generic", 1, (0,), 1, AUTO)
    from dataclasses import replace
    with pytest.raises(ValueError, match="translated"):
        loss(fol, replace(data, translated=False), LossConfig())


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi), st.sampled_from(["generic", "local", "reducible"]))
def test_gauge_invariance(angle, kind):
    fol = _random_foliation(kind)
    data = _forced_data()
    cfg = LossConfig(epsilon=0.2)
    prep = prepare(fol, data, cfg)
    fol.latent_ics = 0.1 * np.random.default_rng(4).normal(size=(data.n_segments, 2))
    Q = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    L0 = loss(fol, data, cfg, prep)[0]
    L1 = loss(rotate_latent(fol, Q), data, cfg, prep)[0]
    assert abs(L1 - L0) <= 1e-10 * max(L0, 1.0)
