"""Benchmark systems and equation-driven reference computations.

Continuous-time systems are written as x' = F(x, theta), theta' = G with
constant forcing rates G. All vector fields accept batches ``x[..., d_X]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from . import linalg
from .basis import FunctionLibrary, rotation_shift, ShiftOperator
from .data import TrajectorySet
from .linid import LinearSkewModel, solve_bundles


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchmarkSystem:
    """Base class; subclasses define ``_field`` and ``_jacobian``."""

    name: str = "system"
    params: dict = field(default_factory=dict)

    d_X = 0

    @property
    def forcing_rates(self):
        """theta' for each forcing angle; empty for autonomous systems."""
        return np.zeros(0)

    @property
    def d_Y(self):
        return len(self.forcing_rates)

    @property
    def theta0(self):
        return np.zeros(self.d_Y)

    def theta_at(self, t):
        t = np.asarray(t, dtype=float)
        return np.mod(self.theta0 + np.multiply.outer(t, self.forcing_rates), 2 * np.pi)

    def with_params(self, **kw):
        p = dict(self.params)
        p.update(kw)
        return replace(self, params=p)

    def vector_field(self, x, theta=None):
        x = np.asarray(x, dtype=float)
        th = np.zeros(x.shape[:-1] + (self.d_Y,)) if theta is None else np.broadcast_to(
            theta, x.shape[:-1] + (self.d_Y,))
        return self._field(x, th)

    def jacobian(self, x, theta=None):
        x = np.asarray(x, dtype=float)
        th = np.zeros(x.shape[:-1] + (self.d_Y,)) if theta is None else np.broadcast_to(
            theta, x.shape[:-1] + (self.d_Y,))
        return self._jacobian(x, th)

    def equilibrium(self):
        return np.zeros(self.d_X)


@dataclass(frozen=True)
class ShawPierre(BenchmarkSystem):
    """Two-mass oscillator with a cubic spring and a cubic damper.

    ``variant="printed"`` uses the linear matrix exactly as published; its
    fourth row makes the two linear modes coincide (a defective double pair).
    ``variant="decoupled"`` uses -(k1+k2), -(c1+c2) in that row, which
    separates the modes while keeping x2 a linear subsystem.
    """

    name: str = "shaw-pierre"
    params: dict = field(default_factory=lambda: dict(
        k1=1.0, k2=3.325, c1=0.05, c2=0.01, alpha=0.5, beta=0.0, omega=1.1892, variant="printed"))

    d_X = 4

    @property
    def matrix(self):
        p = self.params
        k1, k2, c1, c2 = p["k1"], p["k2"], p["c1"], p["c2"]
        if p.get("variant", "printed") == "printed":
            row4 = [0.0, -(k1 + k2) + k2, 0.0, -(c1 + c2) + c2]
        else:
            row4 = [0.0, -(k1 + k2), 0.0, -(c1 + c2)]
        return np.array([[0, 0, 1, 0], [0, 0, 0, 1], [-k1, k2, -c1, c2], row4], dtype=float)

    @property
    def forcing_rates(self):
        if self.params["beta"] == 0:
            return np.zeros(0)
        return np.array([self.params["omega"], 1.0])

    @property
    def theta0(self):
        if self.d_Y == 0:
            return np.zeros(0)
        return np.array([0.1 * self.params["omega"], 0.0])

    def _field(self, x, th):
        p = self.params
        out = x @ self.matrix.T
        out[..., 2] += -p["alpha"] * x[..., 0] ** 3 + p["alpha"] * p["c1"] * x[..., 2] ** 3
        if self.d_Y:
            out[..., 2] += p["beta"] * np.cos(th[..., 0])
            out[..., 3] += p["beta"] * np.cos(th[..., 1])
        return out

    def _jacobian(self, x, th):
        p = self.params
        J = np.broadcast_to(self.matrix, x.shape[:-1] + (4, 4)).copy()
        J[..., 2, 0] += -3 * p["alpha"] * x[..., 0] ** 2
        J[..., 2, 2] += 3 * p["alpha"] * p["c1"] * x[..., 2] ** 2
        return J


@dataclass(frozen=True)
class CarFollowing(BenchmarkSystem):
    """Optimal-velocity ring road; state (v_1..v_n, h_2..h_n), h_1 = L - sum h."""

    name: str = "car-following"
    params: dict = field(default_factory=lambda: dict(alpha=0.75, n=5, L=10.0, A=0.0, omega=0.63246))

    @property
    def d_X(self):
        return 2 * int(self.params["n"]) - 1

    @property
    def forcing_rates(self):
        return np.zeros(0) if self.params["A"] == 0 else np.array([self.params["omega"]])

    @staticmethod
    def _ov(h):
        u = (h - 1) ** 2
        return u / (1 + u)

    @staticmethod
    def _dov(h):
        return 2 * (h - 1) / (1 + (h - 1) ** 2) ** 2

    def _split(self, x):
        n = int(self.params["n"])
        v = x[..., :n]
        hr = x[..., n:]
        h1 = self.params["L"] - hr.sum(axis=-1, keepdims=True)
        return n, v, np.concatenate([h1, hr], axis=-1)

    def _vmax(self, th, n):
        V = np.ones(th.shape[:-1] + (n,))
        if self.d_Y:
            V[..., -1] = 1 + self.params["A"] * np.cos(th[..., 0])
        return V

    def _field(self, x, th):
        n, v, h = self._split(x)
        a = self.params["alpha"]
        vdot = a * (self._vmax(th, n) * self._ov(h) - v)
        hdot = v[..., :-1] - v[..., 1:]
        return np.concatenate([vdot, hdot], axis=-1)

    def _jacobian(self, x, th):
        n, v, h = self._split(x)
        a = self.params["alpha"]
        d = self.d_X
        J = np.zeros(x.shape[:-1] + (d, d))
        g = a * self._vmax(th, n) * self._dov(h)
        for k in range(n):
            J[..., k, k] = -a
            if k == 0:
                J[..., 0, n:] = -g[..., :1]
            else:
                J[..., k, n + k - 1] = g[..., k]
        for k in range(1, n):
            J[..., n + k - 1, k - 1] = 1.0
            J[..., n + k - 1, k] = -1.0
        return J

    def equilibrium(self):
        n, L = int(self.params["n"]), self.params["L"]
        return np.concatenate([np.full(n, self._ov(L / n)), np.full(n - 1, L / n)])


@dataclass(frozen=True)
class LinearTest(BenchmarkSystem):
    """x' = M x; the default M is a lightly damped oscillator."""

    name: str = "linear-test"
    params: dict = field(default_factory=lambda: dict(M=np.array([[0.0, 1.0], [-1.0, -0.1]])))

    @property
    def d_X(self):
        return np.asarray(self.params["M"]).shape[0]

    def _field(self, x, th):
        return x @ np.asarray(self.params["M"]).T

    def _jacobian(self, x, th):
        return np.broadcast_to(np.asarray(self.params["M"], dtype=float), x.shape[:-1] + (self.d_X,) * 2).copy()


def benchmark(name, **params):
    """Benchmark system by name with its reference parameters."""
    cls = {"shaw-pierre": ShawPierre, "car-following": CarFollowing, "linear-test": LinearTest}[name]
    sys = cls()
    return sys.with_params(**params) if params else sys


def vector_field(sys, x, theta=None):
    return sys.vector_field(x, theta)


# ---------------------------------------------------------------- integration


def integrate(sys, x0, n_steps, dt, t0=0.0, rtol=1e-12, atol=1e-12) -> TrajectorySet:
    """Sample a trajectory at t0 + k dt, k = 0..n_steps, as a one-segment set."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x0 = np.asarray(x0, dtype=float)
    rates = sys.forcing_rates
    th0 = sys.theta0

    def rhs(t, x):
        return sys.vector_field(x, th0 + rates * t)

    t_eval = t0 + dt * np.arange(n_steps + 1)
    sol = solve_ivp(rhs, (t_eval[0], t_eval[-1]), x0, method="DOP853", t_eval=t_eval,
                    rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(sol.message)
    return TrajectorySet(sol.y.T, sys.theta_at(t_eval), [0, n_steps + 1], dt, False, t_eval)


def flow_map(sys, X, t0, dt, jacobian=True, rtol=1e-12, atol=1e-13):
    """Time-dt flow map of a batch of states X (P, d_X) starting at times t0.

    Returns ``X_dt`` and, if requested, the Jacobians (P, d_X, d_X).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P, d = X.shape
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (P,))
    rates, th0 = sys.forcing_rates, sys.theta0

    def rhs(s, y):
        th = th0 + np.multiply.outer(t0 + s, rates)
        x = y[:P * d].reshape(P, d)
        fx = sys.vector_field(x, th).ravel()
        if not jacobian:
            return fx
        Phi = y[P * d:].reshape(P, d, d)
        return np.concatenate([fx, (sys.jacobian(x, th) @ Phi).ravel()])

    y0 = X.ravel()
    if jacobian:
        y0 = np.concatenate([y0, np.broadcast_to(np.eye(d), (P, d, d)).ravel()])
    sol = solve_ivp(rhs, (0.0, dt), y0, method="DOP853", rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(sol.message)
    y = sol.y[:, -1]
    Xn = y[:P * d].reshape(P, d)
    if not jacobian:
        return Xn
    return Xn, y[P * d:].reshape(P, d, d)


def periodic_orbit(sys, tol=1e-12, max_iter=30):
    """Periodic response of a singly forced system, as the state at t = 0.

    Solved by Newton shooting on the period 2 pi / omega.
    """
    if sys.d_Y != 1:
        raise ValueError("periodic_orbit needs exactly one forcing frequency")
    T = 2 * np.pi / sys.forcing_rates[0]
    x = sys.equilibrium() if not isinstance(sys, ShawPierre) else np.zeros(sys.d_X)
    for _ in range(max_iter):
        xT, M = flow_map(sys, x, 0.0, T)
        r = xT[0] - x
        if np.linalg.norm(r) < tol:
            break
        x = x - np.linalg.solve(M[0] - np.eye(sys.d_X), r)
    return x


def linear_spectrum(sys, at="equilibrium"):
    """Jacobian eigenvalues at the equilibrium, or Floquet exponents of the
    periodic orbit (principal-branch log of the monodromy multipliers).

    Sorted by descending real part, positive imaginary part first.
    """
    if at == "equilibrium":
        lam = np.linalg.eigvals(sys.jacobian(sys.equilibrium()))
    elif at == "periodic":
        T = 2 * np.pi / sys.forcing_rates[0]
        x = periodic_orbit(sys)
        _, M = flow_map(sys, x, 0.0, T)
        lam = np.log(np.linalg.eigvals(M[0]).astype(complex)) / T
    else:
        raise ValueError(f"unknown linearisation point {at!r}")
    return lam[np.lexsort((-lam.imag, -lam.real))]


def orbit_nodes(sys, lib: FunctionLibrary):
    """States on the periodic orbit at the forcing phases of the library nodes."""
    w = sys.forcing_rates[0]
    x0 = periodic_orbit(sys)
    times = lib.nodes[:, 0] / w
    out = np.empty((lib.n_Y, sys.d_X))
    for l, t in enumerate(times):
        out[l] = x0 if t == 0 else flow_map(sys, x0, 0.0, t, jacobian=False)[0]
    return out


def equation_bundles(sys, n_Y, dt, steady_nodes=None):
    """Bundles of the time-dt map linearised along the stationary state.

    The forcing phase is collocated at ``n_Y`` Dirichlet nodes; an autonomous
    system uses a single node at its equilibrium.
    """
    if sys.d_Y == 0:
        lib = FunctionLibrary.autonomous()
        shift = ShiftOperator.identity(1)
        X = sys.equilibrium()[None, :] if steady_nodes is None else steady_nodes
        t0 = np.zeros(1)
    else:
        lib = FunctionLibrary.torus(n_Y)
        w = sys.forcing_rates[0]
        shift = rotation_shift(lib, w * dt)
        X = orbit_nodes(sys, lib) if steady_nodes is None else steady_nodes
        t0 = lib.nodes[:, 0] / w
    _, J = flow_map(sys, X, t0, dt)
    model = LinearSkewModel.from_nodes(J, lib, shift)
    return solve_bundles(model, dt=dt)


def floquet_collocation(sys, n_Y):
    """Floquet exponents from Fourier collocation of w U' + U J(theta) = lambda U.

    Returns all n_Y * d_X eigenvalues of the collocated operator.
    """
    w = sys.forcing_rates[0]
    lib = FunctionLibrary.torus(n_Y)
    X = orbit_nodes(sys, lib)
    J = sys.jacobian(X, lib.nodes)
    D = linalg.fourier_diff_matrix(n_Y)
    d = sys.d_X
    # row vector U(theta_l) stacked node-major; operator acts from the right
    M = w * np.kron(D.T, np.eye(d)) + np.zeros((n_Y * d, n_Y * d))
    for l in range(n_Y):
        M[l * d:(l + 1) * d, l * d:(l + 1) * d] += J[l]
    return np.linalg.eigvals(M.T)


# ---------------------------------------------------------------- datasets


def _mode_directions(sys, modes=None):
    J = sys.jacobian(sys.equilibrium(), np.zeros(sys.d_Y)) if sys.d_Y else sys.jacobian(sys.equilibrium())
    lam, V = np.linalg.eig(J)
    order = np.lexsort((-lam.imag, -lam.real))
    lam, V = lam[order], V[:, order]
    keep = [k for k in range(len(lam)) if lam[k].imag >= 0]
    if modes is not None:
        keep = [keep[m] for m in modes]
    return V[:, keep]


def sample_initial(sys, amplitude, rng, modes=None, base=None):
    """Impact along dominant linear modes: random complex weights, fixed norm."""
    V = _mode_directions(sys, modes)
    c = rng.normal(size=V.shape[1]) + 1j * rng.normal(size=V.shape[1])
    x = (V @ c).real
    base = sys.equilibrium() if base is None else base
    return base + amplitude * x / np.linalg.norm(x)


def make_dataset(sys, n_traj, length, dt, seed=0, amplitudes=(0.1, 1.0), n_test=1, modes=None,
                 param=None, param_values=None, test_values=None):
    """Training and testing sets from impacts along linear modes.

    Training amplitudes are log-spaced over ``amplitudes``; test amplitudes
    are drawn uniformly in log scale from the same range. With ``param``
    set, trajectory i uses ``sys.with_params(param=param_values[i])``, the
    forcing column records the parameter value and the amplitudes are
    randomly permuted so that amplitude and parameter are not correlated.
    """
    rng = np.random.default_rng(seed)
    lo, hi = amplitudes
    amps = np.geomspace(lo, hi, n_traj) if n_traj > 1 else np.array([hi])
    if param is not None:
        amps = rng.permutation(amps)
    test_amps = np.exp(rng.uniform(np.log(lo), np.log(hi), n_test))

    def run(amp, value):
        s = sys if param is None else sys.with_params(**{param: value})
        base = None
        if s.d_Y == 1:
            base = periodic_orbit(s)
        x0 = sample_initial(s, amp, rng, modes, base)
        seg = integrate(s, x0, length - 1, dt)
        if param is not None:
            seg = replace(seg, forcing=np.full((length, 1), value))
        return seg

    pv = [None] * n_traj if param is None else list(param_values)
    tv = [None] * n_test if param is None else list(test_values)
    train = TrajectorySet.concat([run(a, v) for a, v in zip(amps, pv)])
    test = TrajectorySet.concat([run(a, v) for a, v in zip(test_amps, tv)])
    return train, test


# ---------------------------------------------------------------- linear skew-product generator


@dataclass
class LinearSkewProduct:
    """x+ = A(theta) x + b(theta), theta+ = theta + omega.

    A(theta) = T Q(theta + omega) D Q(theta)^T T^T with Q a rotation by
    theta in the plane of coordinates 1 and 2, which straddles the first two
    blocks of D. A and b are trigonometric polynomials of degree <= 2 and
    the bundle dynamics are exactly D.
    """

    D: np.ndarray
    T: np.ndarray
    s0: np.ndarray
    omega: float
    eigvals: np.ndarray

    @property
    def d_X(self):
        return self.D.shape[0]

    def Q(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = np.broadcast_to(np.eye(self.d_X), theta.shape + (self.d_X,) * 2).copy()
        c, s = np.cos(theta), np.sin(theta)
        a, b = (1, 2) if self.d_X > 2 else (0, 1)
        out[..., a, a], out[..., a, b], out[..., b, a], out[..., b, b] = c, -s, s, c
        return out

    def A(self, theta):
        Qn = self.Q(np.asarray(theta) + self.omega)
        Qt = np.swapaxes(self.Q(theta), -1, -2)
        return self.T @ Qn @ self.D @ Qt @ self.T.T

    def b(self, theta):
        return self.s0 - self.A(theta) @ self.s0

    def step(self, x, theta):
        return self.A(theta) @ x + self.b(theta)

    def simulate(self, n_traj, length, seed=0, amplitude=1.0):
        rng = np.random.default_rng(seed)
        segs = []
        for _ in range(n_traj):
            th = rng.uniform(0, 2 * np.pi)
            x = self.s0 + amplitude * rng.normal(size=self.d_X)
            xs, ths = [], []
            for _ in range(length):
                xs.append(x)
                ths.append(th)
                x = self.step(x, th)
                th = np.mod(th + self.omega, 2 * np.pi)
            segs.append(TrajectorySet(np.array(xs), np.array(ths)[:, None], [0, length], 1.0))
        return TrajectorySet.concat(segs)


def random_linear_skew_product(d_X=4, seed=0, omega=0.7, radii=(0.6, 0.95)):
    """Random stable instance of :class:`LinearSkewProduct` with complex-pair blocks."""
    rng = np.random.default_rng(seed)
    D = np.zeros((d_X, d_X))
    lam = []
    k = 0
    while k < d_X:
        r = rng.uniform(*radii)
        if k + 1 < d_X:
            phi = rng.uniform(0.2, 2.5)
            D[k:k + 2, k:k + 2] = r * np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
            lam += [r * np.exp(1j * phi), r * np.exp(-1j * phi)]
            k += 2
        else:
            D[k, k] = r
            lam.append(r + 0j)
            k += 1
    T = np.linalg.qr(rng.normal(size=(d_X, d_X)))[0]
    s0 = rng.normal(size=d_X)
    return LinearSkewProduct(D, T, s0, omega, np.array(lam))
