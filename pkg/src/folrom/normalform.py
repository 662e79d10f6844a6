"""Invariant manifolds from foliations and their polar normal form.

A two-dimensional invariant manifold is parametrised in polar form as
``w(rho, beta, theta) = rho * v(rho, beta, theta)`` with reduced dynamics

    map:  rho+ = R(rho),  beta+ = beta + T(rho)
    ODE:  rho' = Rh(rho), beta' = Th(rho)

Writing ``R = rho * P(rho)`` removes the trivial factor of rho so that the
collocation system is regular at rho = 0, where it reduces to the linear
eigenvalue problem that fixes P(0), T(0) and v(0, .). ``v`` is collocated
on Chebyshev-Lobatto nodes in rho, a uniform grid in beta and the library
nodes in theta; P and T are stored as nodal values in rho.

Two normalisations make the parametrisation unique: the mean of
``<D_rho w, w>`` over beta and theta equals rho (amplitude), and the mean
of ``<D_rho w, D_beta w>`` vanishes (phase). A single anchor removes the
remaining constant rotation in beta.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .basis import FunctionLibrary, ShiftOperator, eval_library, nodal_shift
from .data import ParseError, read_table, write_table
from .foliation import Foliation

log = logging.getLogger(__name__)


class NormalFormError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolarGrid:
    """Collocation sizes and range; ``n_beta`` must be odd."""

    n_rho: int = 12
    n_beta: int = 9
    rho_max: float | None = None

    def __post_init__(self):
        if self.n_rho < 3 or self.n_beta < 3 or self.n_beta % 2 == 0:
            raise ValueError("need n_rho >= 3 and odd n_beta >= 3")


# ---------------------------------------------------------------- manifolds


@dataclass
class ManifoldSlice:
    """Samples ``w`` of the manifold where ``u_j = z_j`` (j in I) and ``u_j = 0`` otherwise."""

    index_set: tuple
    z: np.ndarray
    alpha: np.ndarray
    w: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


def q_matrix(fols, alpha):
    """Stacked encoder Jacobians at the origin, shape (n, d_X, d_X)."""
    al = np.atleast_2d(alpha)
    d = fols[0].d_X
    zero = np.zeros((al.shape[0], d))
    return np.concatenate([f.state_jacobian(zero, al) for f in fols], axis=1)


def _check_q(Q, cond_max=1e10):
    c = np.linalg.cond(Q)
    if not np.all(c < cond_max):
        raise NormalFormError(f"Q matrix is rank deficient (condition number {np.max(c):.2e})")


def extract_manifold(fols, index_set, z, alpha, tol=1e-10, max_iter=50) -> ManifoldSlice:
    """Solve the stacked encoder equations for ``w`` at each latent point.

    ``z`` (n, sum of d_Z over I) lists latent values, ``alpha`` (n, n_Y)
    library values. Newton starts from the linear predictor ``Q^-1 (z; 0)``.
    Points that fail to converge are returned as NaN with a warning.
    """
    fols = list(fols)
    d = fols[0].d_X
    if sum(f.d_Z for f in fols) != d:
        raise ValueError("latent dimensions must add up to d_X")
    idx = tuple(int(i) for i in np.atleast_1d(index_set))
    z = np.atleast_2d(np.asarray(z, float))
    al = np.broadcast_to(np.atleast_2d(alpha), (z.shape[0], fols[0].n_Y))
    target = np.zeros((z.shape[0], d))
    rows, o = [], 0
    for i, f in enumerate(fols):
        rows.append(slice(o, o + f.d_Z))
        o += f.d_Z
    c = 0
    for i in idx:
        k = fols[i].d_Z
        target[:, rows[i]] = z[:, c:c + k]
        c += k
    if c != z.shape[1]:
        raise ValueError("latent points do not match the index set")
    Q = q_matrix(fols, al)
    _check_q(Q)
    w = np.linalg.solve(Q, target[..., None])[..., 0]

    def resid(w):
        return np.concatenate([f.encode_state(w, al) for f in fols], axis=1) - target

    r = resid(w)
    for _ in range(max_iter):
        nr = np.linalg.norm(r, axis=1)
        if np.all(nr <= tol):
            break
        J = np.concatenate([f.state_jacobian(w, al) for f in fols], axis=1)
        try:
            w = w - np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        r = resid(w)
    nr = np.linalg.norm(r, axis=1)
    ok = np.isfinite(nr) & (nr <= tol)
    if not ok.all():
        warnings.warn(f"manifold Newton failed at {np.sum(~ok)} of {len(ok)} points", RuntimeWarning)
        w[~ok] = np.nan
    return ManifoldSlice(idx, z, np.array(al), w, nr, ok)


# ---------------------------------------------------------------- pointwise models


def _scaled(fun, s, Y, jidx):
    """h(s Y) / s, its Jacobian in Y and its derivative in s; h(0) = 0.

    ``fun(X, j)`` returns h (N, m) and Dh (N, m, d) on flat points. At s = 0
    the value is the linearisation Dh(0) Y and the s-derivative is set to
    zero (it only enters multiplied by s).
    """
    shp = Y.shape[:-1]
    d = Y.shape[-1]
    s = np.broadcast_to(s, shp)
    X = (s[..., None] * Y).reshape(-1, d)
    h, J = fun(X, jidx.reshape(-1))
    m = h.shape[1]
    h = h.reshape(shp + (m,))
    J = J.reshape(shp + (m, d))
    lin = np.einsum("...md,...d->...m", J, Y)
    pos = s > 0
    sp = np.where(pos, s, 1.0)[..., None]
    val = np.where(pos[..., None], h / sp, lin)
    ds = np.where(pos[..., None], (lin - val) / sp, 0.0)
    return val, J, ds


class _KnownMap:
    """x+ = f(x, theta) given with its Jacobian, in coordinates centred on the steady state."""

    def __init__(self, fun, n):
        self.fun = fun
        self.n = n
        self.m_t = None

    def setup(self, d):
        self.m_t = d

    def lhs(self, s, Y, jidx):
        eye = np.broadcast_to(np.eye(self.m_t), Y.shape[:-1] + (self.m_t, self.m_t))
        return Y, eye, np.zeros_like(Y)

    def rhs(self, rho, Y, jidx):
        val, J, _ = _scaled(self.fun, rho, Y, jidx)
        return val, J

    def linear(self, d):
        _, J = self.fun(np.zeros((self.n, d)), np.arange(self.n))
        return J


class _FoliationPair:
    """Tangential equation from the first foliation, normal equations from the rest."""

    def __init__(self, fols, alpha, alpha_g):
        self.fols = list(fols)
        self.alpha = alpha
        self.alpha_g = alpha_g
        self.m_t = self.fols[0].d_Z

    def setup(self, d):
        pass

    def _enc(self, fol, al):
        def fun(X, j):
            a = al[j]
            return fol.encode_state(X, a), fol.state_jacobian(X, a)
        return fun

    def _map(self, fol, al):
        def fun(Z, j):
            a = al[j]
            return fol.conjugate_map(Z, a), fol.map_jacobian(Z, a)
        return fun

    def lhs(self, s, Y, jidx):
        return _scaled(self._enc(self.fols[0], self.alpha_g), s, Y, jidx)

    def rhs(self, rho, Y, jidx):
        f1 = self.fols[0]
        z, Ju, _ = _scaled(self._enc(f1, self.alpha), rho, Y, jidx)
        h, Jr, _ = _scaled(self._map(f1, self.alpha), rho, z, jidx)
        vals, jacs = [h], [Jr @ Ju]
        for f in self.fols[1:]:
            v, J, _ = _scaled(self._enc(f, self.alpha), rho, Y, jidx)
            vals.append(v)
            jacs.append(J)
        return np.concatenate(vals, axis=-1), np.concatenate(jacs, axis=-2)

    def linear(self, d):
        n = len(self.alpha)
        zero = np.zeros((n, d))
        f1 = self.fols[0]
        W = np.linalg.inv(q_matrix(self.fols, self.alpha_g))[:, :, :self.m_t]
        Dr = f1.map_jacobian(np.zeros((n, self.m_t)), self.alpha)
        Du = f1.state_jacobian(zero, self.alpha)
        return W @ Dr @ Du


class _VectorField:
    """x' = F(x, theta) centred on the steady state."""

    def __init__(self, fun, n):
        self.fun = fun
        self.n = n
        self.m_t = None

    def setup(self, d):
        self.m_t = d

    def rhs(self, rho, Y, jidx):
        val, J, _ = _scaled(self.fun, rho, Y, jidx)
        return val, J

    def linear(self, d):
        _, J = self.fun(np.zeros((self.n, d)), np.arange(self.n))
        return J


# ---------------------------------------------------------------- normal form container


@dataclass
class PolarNormalForm:
    """Converged polar normal form on a collocation grid.

    ``R_coeffs`` holds R(rho)/rho at the rho nodes (so R = rho * P is
    smooth at zero) and ``T_coeffs`` holds T(rho); for ``kind="ode"`` they
    are Rh/rho and Th. ``w_coeffs`` has shape (n_rho, n_beta, n_theta, d_X).
    """

    rho_grid: np.ndarray
    R_coeffs: np.ndarray
    T_coeffs: np.ndarray
    w_coeffs: np.ndarray
    dt: float
    kind: str
    rho_trained: float | None = None
    truncated: bool = False
    residual: float = 0.0
    theta_weights: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def rho_max(self):
        return float(self.rho_grid[-1])

    @property
    def n_beta(self):
        return self.w_coeffs.shape[1]

    def _bary(self, rho, deriv=False):
        rho = np.atleast_1d(np.asarray(rho, float))
        if deriv:
            return linalg.bary_diff_matrix(self.rho_grid, rho)
        return linalg.bary_matrix(self.rho_grid, rho)

    def P(self, rho):
        return self._bary(rho) @ self.R_coeffs

    def R(self, rho):
        """R(rho) for maps, Rh(rho) for ODEs."""
        return np.asarray(rho, float) * self.P(rho)

    def dR(self, rho):
        rho = np.atleast_1d(np.asarray(rho, float))
        return self.P(rho) + rho * (self._bary(rho, True) @ self.R_coeffs)

    def T(self, rho):
        return self._bary(rho) @ self.T_coeffs

    def amplitude(self, rho):
        """Root-mean-square of w over beta and theta."""
        w = np.einsum("ri,ikjq->rkjq", self._bary(rho), self.w_coeffs)
        tw = self._weights()
        return np.sqrt(np.einsum("rkjq,j->r", w**2, tw) / self.n_beta)

    def _weights(self):
        n = self.w_coeffs.shape[2]
        return np.full(n, 1.0 / n) if self.theta_weights is None else self.theta_weights

    def constraint_residuals(self):
        """Amplitude and phase conditions evaluated on w at the rho nodes."""
        Dr = linalg.diff_matrix(self.rho_grid)
        Db = linalg.fourier_diff_matrix(self.n_beta)
        W = self.w_coeffs
        Wr = np.einsum("ia,akjq->ikjq", Dr, W)
        Wb = np.einsum("kb,ibjq->ikjq", Db, W)
        tw = self._weights() / self.n_beta
        amp = np.einsum("ikjq,ikjq,j->i", Wr, W - W[:1], tw) - self.rho_grid
        ph = np.einsum("ikjq,ikjq,j->i", Wr, Wb, tw)
        return amp, ph


# ---------------------------------------------------------------- collocation solver


@dataclass
class _Setup:
    rho: np.ndarray
    Dr: np.ndarray
    beta: np.ndarray
    Db: np.ndarray
    S: np.ndarray
    Dth: np.ndarray
    tw: np.ndarray
    d: int

    @property
    def shape(self):
        return (len(self.rho), len(self.beta), len(self.tw), self.d)


def _unpack(x, st):
    nV = int(np.prod(st.shape))
    nr = st.shape[0]
    return x[:nV].reshape(st.shape), x[nV:nV + nr], x[nV + nr:nV + 2 * nr]


def _constraints(V, st, anchor):
    """Amplitude, phase and anchor rows with their Jacobians in V."""
    nr, nb, n, d = V.shape
    wts = st.tw / nb
    Vr = np.einsum("ia,akjq->ikjq", st.Dr, V)
    Vb = np.einsum("kb,ibjq->ikjq", st.Db, V)
    amp = np.einsum("ikjq,ikjq,j->i", V + st.rho[:, None, None, None] * Vr, V, wts) - 1.0
    J_amp = 2 * V * wts[None, None, :, None]
    J_amp = np.einsum("i,ia,ikjq->iakjq", np.ones(nr), np.eye(nr), J_amp)
    J_amp += np.einsum("i,ia,ikjq,j->iakjq", st.rho, st.Dr, V, wts)
    J_amp += np.einsum("i,ia,ikjq,j->iakjq", st.rho, np.eye(nr), Vr, wts)
    ph = np.einsum("ikjq,ikjq,j->i", Vr, Vb, wts)[1:]
    J_ph = np.einsum("ia,ikjq,j->iakjq", st.Dr, Vb, wts)
    J_ph += np.einsum("ia,kb,ikjq,j->iabjq", np.eye(nr), st.Db, Vr, wts)
    J_ph = J_ph[1:]
    sb = np.sin(st.beta)
    an = np.einsum("k,jq,kjq,j->", sb, anchor, V[0], wts)
    J_an = np.zeros(V.shape)
    J_an[0] = np.einsum("k,jq,j->kjq", sb, anchor, wts)
    vals = np.concatenate([amp, ph, [an]])
    J = np.concatenate([J_amp.reshape(nr, -1), J_ph.reshape(nr - 1, -1), J_an.reshape(1, -1)])
    return vals, J


def _system_map(x, st, model, jidx, anchor):
    V, P, T = _unpack(x, st)
    nr, nb, n, d = V.shape
    mt = model.m_t
    s = st.rho * P
    Br = linalg.bary_matrix(st.rho, s)
    dBr = Br @ st.Dr
    Fb = np.stack([linalg.fourier_matrix(nb, st.beta + t) for t in T])
    dFb = np.stack([linalg.fourier_diff_matrix(nb, st.beta + t) for t in T])
    Vs = np.einsum("ia,ikb,jc,abcq->ikjq", Br, Fb, st.S, V)
    Vs_r = np.einsum("ia,ikb,jc,abcq->ikjq", dBr, Fb, st.S, V)
    Vs_b = np.einsum("ia,ikb,jc,abcq->ikjq", Br, dFb, st.S, V)
    sg = np.broadcast_to(s[:, None, None], (nr, nb, n))
    G, DG, Gs = model.lhs(sg, Vs, jidx)
    H, DH = model.rhs(np.broadcast_to(st.rho[:, None, None], (nr, nb, n)), V, jidx)
    E = -H.copy()
    E[..., :mt] += P[:, None, None, None] * G
    NV = nr * nb * n * d
    JE = np.zeros((nr, nb, n, d, NV + 2 * nr))
    JV = JE[..., :NV].reshape(nr, nb, n, d, nr, nb, n, d)
    JV[..., :mt, :, :, :, :] += np.einsum("i,ikjmq,ia,ikb,jc->ikjmabcq", P, DG, Br, Fb, st.S)
    diag = np.einsum("ikjmq,ia,kb,jc->ikjmabcq", DH, np.eye(nr), np.eye(nb), np.eye(n))
    JV -= diag
    dP = G + P[:, None, None, None] * (Gs * st.rho[:, None, None, None]
                                       + st.rho[:, None, None, None]
                                       * np.einsum("ikjmq,ikjq->ikjm", DG, Vs_r))
    dT = P[:, None, None, None] * np.einsum("ikjmq,ikjq->ikjm", DG, Vs_b)
    for i in range(nr):
        JE[i, :, :, :mt, NV + i] = dP[i]
        JE[i, :, :, :mt, NV + nr + i] = dT[i]
    C, JC = _constraints(V, st, anchor)
    JCfull = np.zeros((len(C), NV + 2 * nr))
    JCfull[:, :NV] = JC
    return np.concatenate([E.ravel(), C]), np.vstack([JE.reshape(NV, -1), JCfull])


def _system_ode(x, st, model, jidx, anchor, rate):
    V, P, T = _unpack(x, st)
    nr, nb, n, d = V.shape
    Vr = np.einsum("ia,akjq->ikjq", st.Dr, V)
    Vb = np.einsum("kb,ibjq->ikjq", st.Db, V)
    Vt = np.einsum("jc,ikcq->ikjq", st.Dth, V)
    rho4 = st.rho[:, None, None, None]
    H, DH = model.rhs(np.broadcast_to(st.rho[:, None, None], (nr, nb, n)), V, jidx)
    E = (V + rho4 * Vr) * P[:, None, None, None] + Vb * T[:, None, None, None] + rate * Vt - H
    NV = nr * nb * n * d
    I_r, I_b, I_n, I_d = (np.eye(k) for k in (nr, nb, n, d))
    Ar = np.diag(P) @ (I_r + np.diag(st.rho) @ st.Dr)
    JV = np.einsum("ia,kb,jc,mq->ikjmabcq", Ar, I_b, I_n, I_d)
    JV += np.einsum("ia,kb,jc,mq->ikjmabcq", np.diag(T), st.Db, I_n, I_d)
    JV += rate * np.einsum("ia,kb,jc,mq->ikjmabcq", I_r, I_b, st.Dth, I_d)
    JV -= np.einsum("ikjmq,ia,kb,jc->ikjmabcq", DH, I_r, I_b, I_n)
    JE = np.zeros((nr, nb, n, d, NV + 2 * nr))
    JE[..., :NV] = JV.reshape(nr, nb, n, d, NV)
    for i in range(nr):
        JE[i, ..., NV + i] = V[i] + st.rho[i] * Vr[i]
        JE[i, ..., NV + nr + i] = Vb[i]
    C, JC = _constraints(V, st, anchor)
    JCfull = np.zeros((len(C), NV + 2 * nr))
    JCfull[:, :NV] = JC
    return np.concatenate([E.ravel(), C]), np.vstack([JE.reshape(NV, -1), JCfull])


def _select_eig(lam, Q, target, continuous, period_shift):
    """Pick the eigenpair: the smoothest alias in theta, Im > 0, nearest ``target``.

    Without a target the least damped pair is taken.
    """
    mag = lam.real if continuous else np.log(np.abs(lam) + 1e-300)
    tv = np.abs(np.diff(np.concatenate([Q, Q[:1]], axis=0), axis=0)).sum(axis=(0, 1))
    tv = tv / np.maximum(np.linalg.norm(Q.reshape(-1, Q.shape[-1]), axis=0), 1e-300)
    keep = []
    for p in range(len(lam)):
        if lam[p].imag <= 1e-12 or (not continuous and abs(lam[p]) < 1e-10):
            continue
        same = np.abs(mag - mag[p]) <= 1e-7 * (1 + abs(mag[p]))
        if period_shift and tv[p] > tv[same].min() + 1e-9:
            continue
        keep.append(p)
    if not keep:
        raise NormalFormError("no complex eigenvalue pair found for the linear part")
    keep = np.array(keep)
    if target is not None:
        p = keep[np.argmin(np.abs(lam[keep] - target))]
    else:
        p = keep[np.argmax(mag[keep])]
    return lam[p], Q[:, :, p]


def _initial(st, model, kind, rate, target):
    """Linear solution v0 = Re(exp(i beta) q(theta)) at all rho nodes."""
    nr, nb, n, d = st.shape
    Jl = model.linear(d)
    Bd = np.zeros((n * d, n * d))
    for j in range(n):
        Bd[j * d:(j + 1) * d, j * d:(j + 1) * d] = Jl[j]
    if kind == "ode":
        M = Bd - rate * np.kron(st.Dth, np.eye(d))
    else:
        M = np.linalg.solve(np.kron(st.S, np.eye(d)), Bd)
    lam, Qv = np.linalg.eig(M)
    lam0, q = _select_eig(lam, Qv.reshape(n, d, -1), target, kind == "ode", n > 1)
    c = np.einsum("jq,jq->", q, q)
    q = q * np.exp(-0.5j * np.angle(c))
    q = q * np.sqrt(2.0 / np.einsum("jq,jq,j->", np.abs(q), np.abs(q), st.tw))
    v0 = (np.exp(1j * st.beta)[:, None, None] * q[None]).real
    V = np.broadcast_to(v0, st.shape).copy()
    if kind == "ode":
        P0, T0 = lam0.real, lam0.imag
    else:
        P0, T0 = abs(lam0), np.angle(lam0)
    anchor = q.real * st.tw[:, None] / np.sum(st.tw)
    return V, np.full(nr, P0), np.full(nr, T0), anchor, lam0


def _newton(fun, x, tol, max_iter=50, max_halvings=30):
    r, J = fun(x)
    nrm = np.linalg.norm(r)
    for it in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            return x, r, True, it
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = linalg.lstsq(J, -r)
        if not np.all(np.isfinite(dx)):
            return x, r, False, it
        lam = 1.0
        for _ in range(max_halvings + 1):
            xt = x + lam * dx
            try:
                rt, Jt = fun(xt)
            except (np.linalg.LinAlgError, FloatingPointError, RuntimeError):
                rt = None
            if rt is not None and np.all(np.isfinite(rt)) and np.linalg.norm(rt) < nrm:
                break
            lam *= 0.5
        else:
            return x, r, False, it
        x, r, J, nrm = xt, rt, Jt, np.linalg.norm(rt)
    return x, r, np.max(np.abs(r)) <= tol, max_iter


def _solve(model, kind, grid: PolarGrid, theta, dt, rate=0.0, target=None, tol=1e-9,
           rho_trained=None, steps=(0.25, 0.5, 0.75, 1.0)):
    S, Dth, tw = theta
    n = len(tw)
    d = model.d
    model.setup(d)
    if grid.rho_max is None or grid.rho_max <= 0:
        raise ValueError("rho_max must be positive")
    beta = linalg.fourier_nodes(grid.n_beta)
    Db = linalg.fourier_diff_matrix(grid.n_beta)
    jidx = np.broadcast_to(np.arange(n)[None, None, :], (grid.n_rho, grid.n_beta, n))

    def setup(rmax):
        rho = linalg.cheb_lobatto(grid.n_rho, 0.0, rmax)
        return _Setup(rho, linalg.diff_matrix(rho), beta, Db, S, Dth, tw, d)

    st = setup(grid.rho_max * steps[0])
    V, P, T, anchor, lam0 = _initial(st, model, kind, rate, target)
    best = None
    for frac in steps:
        rmax = grid.rho_max * frac
        new = setup(rmax)
        if best is not None:
            B = linalg.bary_matrix(best[0].rho, new.rho)
            V = np.einsum("ia,akjq->ikjq", B, best[1])
            P, T = B @ best[2], B @ best[3]
        st = new
        x0 = np.concatenate([V.ravel(), P, T])
        if kind == "ode":
            fun = lambda x: _system_ode(x, st, model, jidx, anchor, rate)  # noqa: E731
        else:
            fun = lambda x: _system_map(x, st, model, jidx, anchor)  # noqa: E731
        x, r, ok, its = _newton(fun, x0, tol)
        log.debug("normal form rho_max=%.4g converged=%s iterations=%d residual=%.2e", rmax, ok, its,
                  np.max(np.abs(r)))
        if not ok:
            break
        Vc, Pc, Tc = _unpack(x, st)
        best = (st, Vc, Pc, Tc, float(np.max(np.abs(r))))
    if best is None:
        raise NormalFormError("Newton failed on the smallest amplitude range; the linear part may be "
                              "degenerate or the manifold is not normally hyperbolic")
    st, V, P, T, res = best
    truncated = st.rho[-1] < grid.rho_max * (1 - 1e-12)
    if truncated:
        warnings.warn(f"normal form truncated at rho = {st.rho[-1]:.4g}", RuntimeWarning)
    W = st.rho[:, None, None, None] * V
    return PolarNormalForm(st.rho, P, T, W, dt, kind, rho_trained, bool(truncated), res, tw,
                           dict(linear_eigenvalue=complex(lam0)))


def _theta_setup(library: FunctionLibrary | None, shift: ShiftOperator | None, alpha=None):
    """Nodal shift, theta-derivative and quadrature weights for the theta direction.

    A fixed ``alpha`` (parametric or autonomous use) gives a single node.
    """
    if alpha is not None or library is None or library.n_Y == 1:
        return np.ones((1, 1)), np.zeros((1, 1)), np.ones(1)
    n = library.n_Y
    if not library.is_torus:
        raise ValueError("interval libraries need a fixed alpha for the normal form")
    Om = nodal_shift(library, shift) if shift is not None else np.eye(n)
    Dth = linalg.fourier_diff_matrix(n) if library.dim == 1 else np.zeros((n, n))
    return Om.T, Dth, np.full(n, 1.0 / n)


# ---------------------------------------------------------------- public solvers


def default_rho_max(fols, data, q=95.0):
    """Amplitude reached by the given percentile of the encoded training data.

    The latent radius |z| of the first foliation is converted to the rho
    scale with the linear manifold Q^-1 (z; 0), averaged over phase and theta.
    """
    f1 = fols[0]
    al = data.alphas(f1.library)
    z = f1.encode_state(data.states, al)
    rz = np.percentile(np.linalg.norm(z, axis=1), q)
    lib = f1.library
    alpha = np.eye(lib.n_Y) if lib.is_cardinal else lib.nodal_matrix
    W = np.linalg.inv(q_matrix(fols, alpha))[:, :, :f1.d_Z]
    return float(rz * np.sqrt(np.mean(np.sum(W**2, axis=(1, 2))) / f1.d_Z))


def solve_polar_map(fols, grid: PolarGrid = PolarGrid(), dt=1.0, shift: ShiftOperator | None = None,
                    alpha=None, target=None, tol=1e-9, rho_trained=None) -> PolarNormalForm:
    """Polar normal form of the first foliation, constrained to the zero leaf of the others.

    ``fols[0]`` has a two-dimensional latent space; the remaining foliations
    complete the Q matrix. ``alpha`` fixes the library value for
    parametric models.
    """
    fols = list(fols)
    f1 = fols[0]
    if f1.d_Z != 2:
        raise ValueError("the first foliation must have a two-dimensional latent space")
    if sum(f.d_Z for f in fols) != f1.d_X:
        raise ValueError("latent dimensions must add up to d_X")
    lib = f1.library
    if alpha is None and lib.n_Y > 1 and not lib.is_torus:
        raise ValueError("interval libraries need a fixed alpha")
    theta = _theta_setup(lib, shift, alpha)
    n = len(theta[2])
    if alpha is not None:
        al = np.atleast_2d(eval_library(lib, alpha) if np.ndim(alpha) == 0 else alpha)
        al_g = al
    elif lib.n_Y == 1:
        al = al_g = np.ones((1, 1))
    else:
        al = np.eye(n) if lib.is_cardinal else lib.nodal_matrix
        al_g = al @ shift.matrix.T if shift is not None else al
    _check_q(q_matrix(fols, al))
    _check_q(q_matrix(fols, al_g))
    model = _FoliationPair(fols, al, al_g)
    model.d = f1.d_X
    if grid.rho_max is None:
        raise ValueError("grid.rho_max is required; see default_rho_max")
    return _solve(model, "map", grid, theta, dt, target=target, tol=tol, rho_trained=rho_trained)


def solve_polar_known_map(fun, d_X, grid: PolarGrid, dt=1.0, library=None, shift=None, target=None,
                          tol=1e-9, rho_trained=None) -> PolarNormalForm:
    """Polar normal form of a map given explicitly.

    ``fun(X, j)`` returns f and its Jacobian at points X (N, d_X) for theta
    node indices j, in coordinates centred on the steady state.
    """
    theta = _theta_setup(library, shift)
    model = _KnownMap(fun, len(theta[2]))
    model.d = d_X
    return _solve(model, "map", grid, theta, dt, target=target, tol=tol, rho_trained=rho_trained)


def flow_map_problem(sys, dt, n_Y=1):
    """``fun(X, j)`` for the time-dt map of a benchmark system about its steady state.

    Returns ``(fun, library, shift)``; singly forced systems are sampled at
    ``n_Y`` forcing phases.
    """
    from .basis import rotation_shift
    from .oracle import flow_map, orbit_nodes

    if sys.d_Y == 0:
        lib, shift = None, None
        base = sys.equilibrium()[None, :]
        t0 = np.zeros(1)
    elif sys.d_Y == 1:
        lib = FunctionLibrary.torus(n_Y)
        w = sys.forcing_rates[0]
        shift = rotation_shift(lib, w * dt)
        base = orbit_nodes(sys, lib)
        t0 = lib.nodes[:, 0] / w
    else:
        raise ValueError("flow-map normal forms support at most one forcing frequency")
    nxt = flow_map(sys, base, t0, dt, jacobian=False)

    def fun(X, j):
        Xn, J = flow_map(sys, base[j] + X, t0[j], dt)
        return Xn - nxt[j], J

    return fun, lib, shift


def solve_polar_ode(sys, grid: PolarGrid, n_Y=1, target=None, tol=1e-9, rho_trained=None) -> PolarNormalForm:
    """Polar normal form of a benchmark vector field about its steady state."""
    from .oracle import orbit_nodes

    d = sys.d_X
    if sys.d_Y == 0:
        base = sys.equilibrium()[None, :]
        th = np.zeros((1, 0))
        lib, rate = None, 0.0
    elif sys.d_Y == 1:
        lib = FunctionLibrary.torus(n_Y)
        base = orbit_nodes(sys, lib)
        th = lib.nodes
        rate = float(sys.forcing_rates[0])
    else:
        raise ValueError("ODE normal forms support at most one forcing frequency")
    F0 = sys.vector_field(base, th)

    def fun(X, j):
        x = base[j] + X
        return sys.vector_field(x, th[j]) - F0[j], sys.jacobian(x, th[j])

    theta = _theta_setup(lib, None)
    model = _VectorField(fun, len(theta[2]))
    model.d = d
    return _solve(model, "ode", grid, theta, 1.0, rate=rate, target=target, tol=tol,
                  rho_trained=rho_trained)


# ---------------------------------------------------------------- backbones


BACKBONE_COLUMNS = ("rho", "amplitude", "omega", "freq_hz", "zeta", "zeta_alt", "extrapolated")


@dataclass
class Backbone:
    rho: np.ndarray
    amplitude: np.ndarray
    omega: np.ndarray
    zeta: np.ndarray
    zeta_alt: np.ndarray
    extrapolated: np.ndarray

    @property
    def freq_hz(self):
        return self.omega / (2 * np.pi)

    def to_csv(self, path):
        write_table(path, dict(rho=self.rho, amplitude=self.amplitude, omega=self.omega,
                               freq_hz=self.freq_hz, zeta=self.zeta, zeta_alt=self.zeta_alt,
                               extrapolated=self.extrapolated.astype(float)))

    @classmethod
    def from_csv(cls, path):
        c = read_table(path, BACKBONE_COLUMNS, allow_nan=True)
        return cls(c["rho"], c["amplitude"], c["omega"], c["zeta"], c["zeta_alt"], c["extrapolated"] > 0.5)


def _rho_samples(nf, n_points):
    return np.linspace(0.0, nf.rho_max, n_points)


def backbone_map(nf: PolarNormalForm, n_points=101) -> Backbone:
    """Instantaneous damping and frequency of a map normal form.

    zeta = -log(R'(rho)) / T, omega = T / dt and zeta_alt = -log(R/rho) / T.
    Nodes where R' <= 0 have undefined damping (NaN).
    """
    if nf.kind != "map":
        raise ValueError("backbone_map needs a map normal form")
    rho = _rho_samples(nf, n_points)
    T = nf.T(rho)
    dR = nf.dR(rho)
    P = nf.P(rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(dR > 0, -np.log(np.where(dR > 0, dR, 1.0)) / T, np.nan)
        zeta_alt = np.where(P > 0, -np.log(np.where(P > 0, P, 1.0)) / T, np.nan)
    return Backbone(rho, nf.amplitude(rho), T / nf.dt, zeta, zeta_alt, _extrap(nf, rho))


def backbone_ode(nf: PolarNormalForm, n_points=101) -> Backbone:
    """zeta = -Rh'(rho) / Th, omega = Th and zeta_alt = -(Rh/rho) / Th."""
    if nf.kind != "ode":
        raise ValueError("backbone_ode needs an ODE normal form")
    rho = _rho_samples(nf, n_points)
    T = nf.T(rho)
    return Backbone(rho, nf.amplitude(rho), T, -nf.dR(rho) / T, -nf.P(rho) / T, _extrap(nf, rho))


def backbone(nf: PolarNormalForm, n_points=101) -> Backbone:
    return backbone_map(nf, n_points) if nf.kind == "map" else backbone_ode(nf, n_points)


def _extrap(nf, rho):
    if nf.rho_trained is None:
        return np.zeros(len(rho), bool)
    return rho > nf.rho_trained * (1 + 1e-12)


def compare_backbones(a: Backbone, b: Backbone, n_points=201, by="amplitude"):
    """Max |d omega| / omega and max |d zeta| over the common, non-extrapolated range.

    Curves are compared as functions of ``by`` ("amplitude" or "rho").
    """
    def clean(bb):
        keep = ~bb.extrapolated & np.isfinite(bb.omega)
        x = getattr(bb, by)[keep]
        o = np.argsort(x)
        return x[o], bb.omega[keep][o], bb.zeta[keep][o]

    xa, oa, za = clean(a)
    xb, ob, zb = clean(b)
    lo, hi = max(xa[0], xb[0]), min(xa[-1], xb[-1])
    if not hi > lo:
        raise ValueError("backbones have disjoint ranges")
    x = np.linspace(lo, hi, n_points)
    Oa, Ob = np.interp(x, xa, oa), np.interp(x, xb, ob)
    Za, Zb = np.interp(x, xa, za), np.interp(x, xb, zb)
    fin = np.isfinite(Za) & np.isfinite(Zb)
    return dict(omega_rel=float(np.max(np.abs(Oa - Ob) / np.abs(Ob))),
                zeta_abs=float(np.max(np.abs(Za - Zb)[fin])) if fin.any() else float("nan"),
                zeta_rel=float(np.max((np.abs(Za - Zb) / np.abs(Zb))[fin])) if fin.any() else float("nan"),
                range=(float(lo), float(hi)))


def read_backbone(path) -> Backbone:
    try:
        return Backbone.from_csv(path)
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None
