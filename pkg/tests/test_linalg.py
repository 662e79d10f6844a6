import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from folrom import linalg
from folrom.linalg import ContractionSpec, contract


def test_matvec():
    rng = np.random.default_rng(0)
    A, v = rng.normal(size=(3, 4)), rng.normal(size=4)
    assert np.allclose(contract("ij,j->i", A, v), A @ v, atol=1e-14)


def test_identity_contraction():
    v = np.arange(5.0)
    assert np.array_equal(contract("ij,j->i", np.eye(5), v), v)


def test_held_index_against_loops():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(2, 3, 4))
    v = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    B = contract("ijk,jl_,kl_->il", A, v, w)
    ref = np.zeros((2, 5))
    for i in range(2):
        for l in range(5):
            for j in range(3):
                for k in range(4):
                    ref[i, l] += A[i, j, k] * v[j, l] * w[k, l]
    assert np.abs(B - ref).max() <= 1e-13


def _loop_reference(pattern, tensors):
    spec = ContractionSpec.parse(pattern)
    sizes = {}
    for op, t in zip(spec.operands, tensors):
        sizes.update(zip(op, t.shape))
    letters = sorted(sizes)
    out = np.zeros([sizes[c] for c in spec.output])
    for idx in np.ndindex(*[sizes[c] for c in letters]):
        pos = dict(zip(letters, idx))
        val = 1.0
        for op, t in zip(spec.operands, tensors):
            val *= t[tuple(pos[c] for c in op)]
        out[tuple(pos[c] for c in spec.output)] += val
    return out


# patterns used by linid and foliation
PATTERNS = ["ijk,j->ik", "ijk,nj,nk->ni", "il,ljt->ijlt", "lik,jl->ijk", "ijk,njc,nk->nic", "ai,ijk,lj->alk"]


@settings(max_examples=30, deadline=None)
@given(k=st.integers(0, len(PATTERNS) - 1), seed=st.integers(0, 10_000), data=st.data())
def test_contraction_matches_loops(k, seed, data):
    pattern = PATTERNS[k]
    spec = ContractionSpec.parse(pattern)
    letters = sorted(set("".join(spec.operands)))
    sizes = {c: data.draw(st.integers(1, 4)) for c in letters}
    rng = np.random.default_rng(seed)
    tensors = [rng.normal(size=[sizes[c] for c in op]) for op in spec.operands]
    assert np.abs(contract(pattern, *tensors) - _loop_reference(pattern, tensors)).max() <= 1e-13


def test_shape_mismatch_names_index():
    with pytest.raises(ValueError, match="'j'"):
        contract("ij,j->i", np.ones((2, 3)), np.ones(4))


def test_bad_held_index():
    with pytest.raises(ValueError):
        ContractionSpec.parse("ij_,jk->ik")
    with pytest.raises(ValueError):
        ContractionSpec.parse("ij_,jk_->ik")
    with pytest.raises(ValueError):
        ContractionSpec.parse("ij,jk->iz")


def test_left_eig_diagonal():
    lam, V = linalg.left_eig(np.diag([3.0, 1.0, 2.0]))
    for p in range(3):
        assert np.isclose(np.abs(V[p]).max(), 1.0)
        assert np.count_nonzero(np.abs(V[p]) > 1e-14) == 1


def test_left_eig_rotation_scale():
    c, s = 0.9 * np.cos(0.3), 0.9 * np.sin(0.3)
    lam, _ = linalg.left_eig(np.array([[c, -s], [s, c]]))
    assert np.isclose(lam[0], np.conj(lam[1]))
    assert np.allclose(np.abs(lam), 0.9)


def test_left_eig_random_residual():
    M = np.random.default_rng(2).normal(size=(50, 50))
    lam, V = linalg.left_eig(M)
    res = np.abs(V @ M - lam[:, None] * V).max()
    assert res <= 1e-10 * np.linalg.norm(M, 2)


def test_svd_reconstruction():
    M = np.random.default_rng(3).normal(size=(7, 4))
    U, s, Vt = linalg.svd(M)
    assert np.linalg.norm(M - U @ np.diag(s) @ Vt) <= 1e-12 * np.linalg.norm(M)


def test_lstsq_exact():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(10, 3))
    x = rng.normal(size=3)
    assert np.allclose(linalg.lstsq(A, A @ x), x, atol=1e-12)


def test_polar_factor_rows_orthonormal():
    P = linalg.polar_factor(np.random.default_rng(5).normal(size=(2, 5)))
    assert np.allclose(P @ P.T, np.eye(2), atol=1e-14)


def test_chebyshev_diff_exact_on_polynomials():
    x = linalg.cheb_lobatto(8, 0.0, 2.0)
    D = linalg.diff_matrix(x)
    assert np.allclose(D @ x**5, 5 * x**4, atol=1e-10)


def test_fourier_diff_exact_on_trig():
    n = 9
    t = linalg.fourier_nodes(n)
    D = linalg.fourier_diff_matrix(n)
    assert np.allclose(D @ np.sin(3 * t), 3 * np.cos(3 * t), atol=1e-12)
