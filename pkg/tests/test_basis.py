import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from folrom import linalg
from folrom.basis import (ExtrapolationWarning, FunctionLibrary, RankDeficiencyError, ShiftOperator,
                          eval_library, fit_shift_lsq, rotation_shift)


def test_torus_cardinal_at_nodes():
    lib = FunctionLibrary.torus(5)
    alpha = eval_library(lib, lib.nodes[2, 0])
    assert np.allclose(alpha, [0, 0, 1, 0, 0], atol=1e-14)
    assert np.allclose(eval_library(lib, lib.nodes[:, 0]), np.eye(5), atol=1e-14)


def test_dirichlet_self_weight():
    for n in (3, 5, 9, 17):
        assert np.isclose(linalg.dirichlet(0.0, n), n)


def test_torus_partition_of_unity():
    lib = FunctionLibrary.torus(7)
    th = np.random.default_rng(0).uniform(0, 2 * np.pi, 50)
    assert np.allclose(eval_library(lib, th).sum(axis=1), 1.0, atol=1e-13)


def test_even_grid_rejected():
    with pytest.raises(ValueError):
        FunctionLibrary.torus(4)
    with pytest.raises(ValueError):
        FunctionLibrary.torus(1)


def test_monomial_interval_basis():
    lib = FunctionLibrary.interval(5, 0.4, 0.6, basis="monomial")
    assert np.allclose(eval_library(lib, 0.5), [1, 0.5, 0.25, 0.125, 0.0625])


def test_interval_extrapolation_warns():
    lib = FunctionLibrary.interval(5, 0.4, 0.6)
    with pytest.warns(ExtrapolationWarning):
        alpha = eval_library(lib, 0.7)
    assert np.isclose(alpha.sum(), 1.0)


def test_lagrange_interval_reproduces_quartic():
    lib = FunctionLibrary.interval(5, 0.4, 0.6)
    p = np.polynomial.Polynomial([0.3, -1.0, 2.0, 0.5, -4.0])
    x = np.linspace(0.4, 0.6, 13)
    vals = eval_library(lib, x) @ p(lib.nodes[:, 0])
    assert np.allclose(vals, p(x), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_dirichlet_interpolation_exact(m, seed):
    n = 2 * m + 1
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=m + 1), rng.normal(size=m + 1)

    def p(t):
        k = np.arange(m + 1)
        return np.cos(np.outer(t, k)) @ a + np.sin(np.outer(t, k)) @ b

    lib = FunctionLibrary.torus(n)
    th = rng.uniform(-10, 10, 40)
    assert np.abs(eval_library(lib, th) @ p(lib.nodes[:, 0]) - p(th)).max() <= 1e-10


def test_rotation_shift_zero_is_identity():
    assert np.allclose(rotation_shift(FunctionLibrary.torus(7), 0.0).matrix, np.eye(7), atol=1e-14)


def test_rotation_by_one_step_is_cyclic_permutation():
    lib = FunctionLibrary.torus(5)
    Om = rotation_shift(lib, 2 * np.pi / 5).matrix
    # alpha(theta + w) = Om alpha(theta): the node-j indicator moves to node j+1
    P = np.roll(np.eye(5), 1, axis=0)
    assert np.allclose(Om, P, atol=1e-14)


def test_car_following_shift_unitary():
    sh = rotation_shift(FunctionLibrary.torus(17), 0.63246 * 0.5)
    assert sh.unitarity_error() < 1e-12


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 50), w=st.floats(-10, 10))
def test_rotation_unitary_any_size(m, w):
    assert rotation_shift(FunctionLibrary.torus(2 * m + 1), w).unitarity_error() <= 1e-12


def test_shift_consistency_random_angles():
    lib = FunctionLibrary.torus(9)
    w = 0.37
    Om = rotation_shift(lib, w).matrix
    th = np.random.default_rng(1).uniform(0, 2 * np.pi, 100)
    assert np.abs(eval_library(lib, th + w) - eval_library(lib, th) @ Om.T).max() <= 1e-10


def test_two_torus_is_tensor_product():
    lib = FunctionLibrary.torus(3, 5)
    sh = rotation_shift(lib, [0.2, -0.4])
    assert sh.unitarity_error() < 1e-12
    th = np.array([[0.3, 1.1], [2.0, 5.0]])
    a = eval_library(lib, th)
    assert np.allclose(eval_library(lib, th + [0.2, -0.4]), a @ sh.matrix.T, atol=1e-12)


def test_rotation_needs_torus():
    with pytest.raises(TypeError):
        rotation_shift(FunctionLibrary.interval(3, 0, 1), 0.1)


def test_lsq_shift_matches_analytic():
    lib = FunctionLibrary.torus(5)
    w = 0.7
    th = 0.3 + w * np.arange(30)
    sh = fit_shift_lsq(eval_library(lib, th), [0, 30])
    assert sh.source == "least-squares"
    assert np.allclose(sh.matrix, rotation_shift(lib, w).matrix, atol=1e-8)


def test_lsq_shift_skips_segment_boundaries():
    lib = FunctionLibrary.torus(5)
    w = 0.7
    a = eval_library(lib, 0.3 + w * np.arange(20))
    b = eval_library(lib, 2.9 + w * np.arange(20))
    sh = fit_shift_lsq(np.vstack([a, b]), [0, 20, 40])
    assert np.allclose(sh.matrix, rotation_shift(lib, w).matrix, atol=1e-8)


def test_lsq_shift_parameter_case_identity():
    lib = FunctionLibrary.interval(3, 0.0, 1.0, basis="monomial")
    segs = [eval_library(lib, np.full(4, p)) for p in (0.1, 0.5, 0.9)]
    sh = fit_shift_lsq(np.vstack(segs), [0, 4, 8, 12])
    assert np.allclose(sh.matrix, np.eye(3), atol=1e-10)


def test_lsq_shift_rank_deficient():
    lib = FunctionLibrary.torus(5)
    with pytest.raises(RankDeficiencyError) as e:
        fit_shift_lsq(eval_library(lib, 0.7 * np.arange(5)), [0, 5])
    assert e.value.deficient_dim >= 1


def test_identity_shift():
    assert ShiftOperator.identity(3).unitarity_error() == 0
