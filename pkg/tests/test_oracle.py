import numpy as np
import pytest

from folrom.oracle import (benchmark, equation_bundles, flow_map, integrate, linear_spectrum, make_dataset,
                           periodic_orbit, random_linear_skew_product)

# Jacobian eigenvalues of the optimal-velocity ring road (alpha 0.75, n 5, L 10)
CAR_EIGS = np.array([-0.0163 + 0.4971j, -0.0163 - 0.4971j, -0.2276 + 0.7480j, -0.2276 - 0.7480j,
                     -0.5223 + 0.7480j, -0.5223 - 0.7480j, -0.7337 + 0.4971j, -0.7337 - 0.4971j, -0.75])


def _fd_jacobian(sys, x, th=None, h=1e-6):
    d = len(x)
    J = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        J[:, k] = (sys.vector_field(x + e, th) - sys.vector_field(x - e, th)) / (2 * h)
    return J


@pytest.mark.parametrize("name", ["shaw-pierre", "car-following", "linear-test"])
def test_equilibrium_is_fixed_point(name):
    sys = benchmark(name)
    x = sys.equilibrium()
    assert np.abs(sys.vector_field(x)).max() <= 1e-14


@pytest.mark.parametrize("name,kw", [("shaw-pierre", {}), ("shaw-pierre", {"beta": 0.1}),
                                     ("car-following", {}), ("car-following", {"A": 0.1})])
def test_jacobian_matches_finite_differences(name, kw):
    sys = benchmark(name, **kw)
    rng = np.random.default_rng(0)
    x = sys.equilibrium() + 0.3 * rng.normal(size=sys.d_X)
    th = rng.uniform(0, 2 * np.pi, sys.d_Y) if sys.d_Y else None
    J = sys.jacobian(x, th)
    assert np.abs(J - _fd_jacobian(sys, x, th)).max() <= 1e-8


def test_shaw_pierre_linear_part():
    sys = benchmark("shaw-pierre", variant="decoupled")
    assert np.allclose(sys.jacobian(np.zeros(4)), sys.matrix)
    # the printed linear matrix has a double eigenvalue pair
    lam = np.linalg.eigvals(benchmark("shaw-pierre").matrix)
    assert np.allclose(np.sort_complex(lam)[::2], np.sort_complex(lam)[1::2], atol=1e-6)


def test_integrate_exponential():
    sys = benchmark("linear-test", M=np.array([[-0.3]]))
    seg = integrate(sys, [2.0], 10, 0.5)
    assert np.allclose(seg.states[:, 0], 2.0 * np.exp(-0.3 * 0.5 * np.arange(11)), rtol=1e-10)
    assert seg.n_segments == 1 and seg.dt == 0.5


def test_harmonic_oscillator_energy():
    sys = benchmark("linear-test", M=np.array([[0.0, 1.0], [-1.0, 0.0]]))
    seg = integrate(sys, [1.0, 0.0], 200, 0.5)
    E = np.sum(seg.states**2, axis=1)
    assert np.abs(E - 1.0).max() <= 1e-9


def test_flow_map_jacobian():
    sys = benchmark("shaw-pierre", variant="decoupled")
    x = np.array([[0.2, -0.1, 0.05, 0.1]])
    Xn, J = flow_map(sys, x, 0.0, 0.3)
    h = 1e-6
    fd = np.column_stack([(flow_map(sys, x + h * e, 0.0, 0.3, False) - flow_map(sys, x - h * e, 0.0, 0.3, False))[0]
                          / (2 * h) for e in np.eye(4)])
    assert np.abs(J[0] - fd).max() <= 1e-7


def test_dataset_determinism_and_counts():
    sys = benchmark("shaw-pierre", variant="decoupled")
    a = make_dataset(sys, 3, 20, 0.278, seed=5, amplitudes=(0.2, 0.6))
    b = make_dataset(sys, 3, 20, 0.278, seed=5, amplitudes=(0.2, 0.6))
    assert np.array_equal(a[0].states, b[0].states)
    assert a[0].n_segments == 3 and a[1].n_segments == 1
    assert a[0].n_samples == 60
    first = a[0].states[a[0].boundaries[:-1]]
    assert np.allclose(np.linalg.norm(first, axis=1), np.geomspace(0.2, 0.6, 3))


def test_parametric_dataset_records_parameter():
    sys = benchmark("shaw-pierre", variant="decoupled")
    tr, te = make_dataset(sys, 2, 10, 0.278, param="alpha", param_values=[0.4, 0.6], test_values=[0.5])
    assert set(tr.forcing[:, 0]) == {0.4, 0.6}
    assert np.all(te.forcing == 0.5)


def test_car_following_headways_conserved():
    sys = benchmark("car-following")
    x0 = sys.equilibrium() + 0.05 * np.random.default_rng(0).normal(size=sys.d_X)
    seg = integrate(sys, x0, 40, 0.5)
    h1 = sys.params["L"] - seg.states[:, 5:].sum(axis=1)
    assert np.all(h1 > 0)
    v_eq = sys.equilibrium()[0]
    assert abs(v_eq - 0.5) <= 1e-14  # V(L / n) with headway 2


def test_car_following_spectrum():
    lam = linear_spectrum(benchmark("car-following"))
    assert np.allclose(np.sort_complex(lam), np.sort_complex(CAR_EIGS), atol=5e-4)
    assert np.isclose(lam[-1], -0.75, atol=1e-12)


def test_periodic_orbit_is_periodic():
    sys = benchmark("car-following", A=0.1)
    x = periodic_orbit(sys)
    T = 2 * np.pi / sys.forcing_rates[0]
    xT = flow_map(sys, x, 0.0, T, jacobian=False)[0]
    assert np.abs(xT - x).max() <= 1e-10


def test_equation_bundles_match_spectrum():
    B = equation_bundles(benchmark("car-following"), 1, 0.5)
    lam = np.sort_complex(B.continuous(0.5))
    assert np.allclose(lam, np.sort_complex(linear_spectrum(benchmark("car-following"))), atol=1e-8)


def test_linear_generator():
    g = random_linear_skew_product(4, seed=1)
    assert np.all(np.abs(g.eigvals) < 1)
    th = 0.7
    assert np.allclose(g.step(g.s0, th), g.s0)
    data = g.simulate(2, 5, seed=0)
    assert data.n_segments == 2 and data.d_Y == 1
