"""Invariant foliations: encoder u, conjugate map r, trajectory loss.

The encoder acts on the transformed state ``x_breve = breve_U(alpha) x``
(the linear bundle coordinates produced by :mod:`folrom.linid`)::

    z_i = u1[i, j, k] alpha_j x_breve_k + unl[i, j, f] alpha_j F_f(x_breve)

where the nonlinear features ``F`` depend on the encoder kind:

* ``generic``: monomials of degree 2..EO containing at least one
  complementary (perp) coordinate; each is a perp factor times a monomial
  of degree k-1 in all coordinates.
* ``local``: monomials of degree 2..EO in the perp coordinates only.
* ``reducible``: all monomials of degree 2..EO.

The conjugate map is ``r_i(z, alpha) = R[i, j, k] phi_j(z) alpha_k`` with
``phi`` the monomials of degree 1..order in graded lexicographic order (no
constant term, so r(0) = 0). An autonomous map uses a single library slot.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass

import numpy as np

from .basis import FunctionLibrary, ShiftOperator
from .data import TrajectorySet

KINDS = ("generic", "local", "reducible")


class DivergenceError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"latent state diverged at step {step}")
        self.step = step


def monomial_exponents(n_vars, degrees):
    """Exponent rows of all monomials with the given total degrees, graded lex."""
    rows = []
    for deg in degrees:
        for combo in itertools.combinations_with_replacement(range(n_vars), deg):
            e = np.zeros(n_vars, dtype=int)
            for c in combo:
                e[c] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(-1, n_vars)


def eval_monomials(x, exps):
    """x (n, d), exps (m, d) -> (n, m)."""
    x = np.asarray(x, dtype=float)
    if exps.shape[0] == 0:
        return np.zeros(x.shape[:-1] + (0,))
    return np.prod(x[..., None, :] ** exps, axis=-1)


def monomial_jacobian(x, exps):
    """d phi_m / d x_c, shape (n, m, d)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    out = np.zeros((n, exps.shape[0], d))
    for c in range(d):
        e = exps.copy()
        has = e[:, c] > 0
        e[has, c] -= 1
        out[:, :, c] = np.where(has, exps[:, c], 0) * eval_monomials(x, e)
    return out


def sigma_eps(x, eps):
    """Weight approximating 1/|x| away from 0; 1 at 0, 1/2 at eps."""
    x = np.abs(np.asarray(x, dtype=float))
    s = x / eps
    small = 1.0 / (1.0 + 2.0 * s**3 - s**4)
    with np.errstate(divide="ignore"):
        large = eps / (2.0 * x)
    return np.where(x < eps, small, large)


def default_epsilon(data: TrajectorySet):
    """Twice the median of the smallest 5% of state norms."""
    norms = np.sort(np.linalg.norm(data.states, axis=1))
    k = max(1, int(np.ceil(0.05 * len(norms))))
    eps = 2.0 * float(np.median(norms[:k]))
    return eps if eps > 0 else float(np.median(norms)) or 1.0


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.1
    max_horizon: int | None = None
    guard: float = 1e6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


class Foliation:
    """Encoder and conjugate map of one invariant foliation.

    Parameters are plain arrays; the optimizer works on a copy.
    """

    def __init__(self, kind, enc_order, coords, d_X, library: FunctionLibrary, frame=None,
                 map_order=1, autonomous_map=False, u1=None, unl=None, R=None, latent_ics=None):
        if kind not in KINDS:
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.enc_order = int(enc_order)
        self.coords = tuple(int(c) for c in coords)
        self.d_X = int(d_X)
        self.perp = tuple(c for c in range(self.d_X) if c not in self.coords)
        self.library = library
        n_Y = library.n_Y
        self.frame = np.eye(d_X)[:, None, :] * np.ones((1, n_Y, 1)) if frame is None else np.asarray(frame, float)
        self.map_order = int(map_order)
        self.autonomous_map = bool(autonomous_map)
        self._build_features()
        self.map_exps = monomial_exponents(self.d_Z, range(1, self.map_order + 1))
        n_R = 1 if self.autonomous_map else n_Y
        self.u0 = np.zeros((self.d_Z, n_Y))
        self.u1 = np.zeros((self.d_Z, n_Y, d_X)) if u1 is None else np.asarray(u1, float)
        self.unl = np.zeros((self.d_Z, n_Y, len(self.feat_exps))) if unl is None else np.asarray(unl, float)
        self.R = np.zeros((self.d_Z, len(self.map_exps), n_R)) if R is None else np.asarray(R, float)
        self.latent_ics = np.zeros((0, self.d_Z)) if latent_ics is None else np.asarray(latent_ics, float)

    # ------------------------------------------------------------ structure

    @property
    def d_Z(self):
        return len(self.coords)

    @property
    def n_Y(self):
        return self.library.n_Y

    @property
    def pointwise_constraint(self):
        """True when u1 is orthonormal per library slot (generic/local)."""
        return self.kind != "reducible"

    def _build_features(self):
        d, perp = self.d_X, self.perp
        degs = range(2, self.enc_order + 1)
        e_breve, e_perp = [], []
        if self.kind == "reducible":
            for e in monomial_exponents(d, degs):
                e_breve.append(e)
                e_perp.append(np.zeros(len(perp), int))
        elif self.kind == "local":
            for f in monomial_exponents(len(perp), degs):
                e_breve.append(np.zeros(d, int))
                e_perp.append(f)
        else:
            for e in monomial_exponents(d, degs):
                hit = [p for p in perp if e[p] > 0]
                if not hit:
                    continue
                a = hit[0]
                rest = e.copy()
                rest[a] -= 1
                f = np.zeros(len(perp), int)
                f[perp.index(a)] = 1
                e_breve.append(rest)
                e_perp.append(f)
        self.feat_breve = np.array(e_breve, int).reshape(len(e_breve), d)
        self.feat_perp = np.array(e_perp, int).reshape(len(e_perp), len(perp))
        full = self.feat_breve.copy()
        for k, p in enumerate(perp):
            full[:, p] += self.feat_perp[:, k]
        self.feat_exps = full

    def copy(self):
        return copy.deepcopy(self)

    # ------------------------------------------------------------ evaluation

    def breve(self, x, alpha):
        """Transformed state breve_U(alpha) x."""
        return np.einsum("ijk,...j,...k->...i", self.frame, alpha, x)

    def features(self, x_breve):
        return eval_monomials(np.atleast_2d(x_breve), self.feat_exps)

    def encode(self, x_breve, alpha):
        """u evaluated on transformed states with x_perp taken from x_breve."""
        xb = np.atleast_2d(x_breve)
        al = np.atleast_2d(alpha)
        z = np.einsum("ijk,nj,nk->ni", self.u1, al, xb)
        z += np.einsum("ij,nj->ni", self.u0, al)
        if self.unl.shape[2]:
            z += np.einsum("ijf,nj,nf->ni", self.unl, al, self.features(xb))
        return z

    def encode_state(self, x, alpha):
        """u(x, theta) on physical (translated) states."""
        al = np.atleast_2d(alpha)
        return self.encode(self.breve(np.atleast_2d(x), al), al)

    def encoder_jacobian(self, x_breve, alpha):
        """d z / d x_breve, shape (n, d_Z, d_X)."""
        xb = np.atleast_2d(x_breve)
        al = np.atleast_2d(alpha)
        J = np.einsum("ijk,nj->nik", self.u1, al)
        if self.unl.shape[2]:
            dF = monomial_jacobian(xb, self.feat_exps)
            J += np.einsum("ijf,nj,nfc->nic", self.unl, al, dF)
        return J

    def state_jacobian(self, x, alpha):
        """d u / d x on physical states, shape (n, d_Z, d_X)."""
        al = np.atleast_2d(alpha)
        xb = self.breve(np.atleast_2d(x), al)
        Ub = np.einsum("ijk,nj->nik", self.frame, al)
        return self.encoder_jacobian(xb, al) @ Ub

    def map_alpha(self, alpha):
        al = np.atleast_2d(alpha)
        return np.ones((al.shape[0], 1)) if self.autonomous_map else al

    def conjugate_map(self, z, alpha):
        z = np.atleast_2d(z)
        phi = eval_monomials(z, self.map_exps)
        return np.einsum("ijk,nj,nk->ni", self.R, phi, self.map_alpha(alpha))

    def map_jacobian(self, z, alpha):
        z = np.atleast_2d(z)
        dphi = monomial_jacobian(z, self.map_exps)
        return np.einsum("ijk,njc,nk->nic", self.R, dphi, self.map_alpha(alpha))

    def constraint_residual(self):
        """Max deviation of u1 from orthonormal rows, per the kind's rule."""
        if self.pointwise_constraint:
            G = np.einsum("ijk,ljk->jil", self.u1, self.u1)
            return float(np.abs(G - np.eye(self.d_Z)).max())
        X = self.u1.reshape(self.d_Z, -1)
        return float(np.abs(X @ X.T - np.eye(self.d_Z)).max())

    def min_singular_value(self):
        if self.pointwise_constraint:
            return float(min(np.linalg.svd(self.u1[:, j, :], compute_uv=False).min()
                             for j in range(self.n_Y)))
        return float(np.linalg.svd(self.u1.reshape(self.d_Z, -1), compute_uv=False).min())

    # ------------------------------------------------------------ parameter vector

    blocks = ("u1", "unl", "R", "latent_ics")

    def get_params(self):
        return np.concatenate([getattr(self, b).ravel() for b in self.blocks])

    def set_params(self, p):
        o = 0
        for b in self.blocks:
            a = getattr(self, b)
            setattr(self, b, np.asarray(p[o:o + a.size], float).reshape(a.shape))
            o += a.size
        return self

    def block_slices(self):
        out, o = {}, 0
        for b in self.blocks:
            n = getattr(self, b).size
            out[b] = slice(o, o + n)
            o += n
        return out


def rotate_latent(fol: Foliation, Q) -> Foliation:
    """Gauge transform z -> Q z of an orthogonal Q: u -> Q u, r -> Q r(Q^T z).

    The map tensor is re-expanded exactly in the monomial basis, which is
    closed under linear changes of variables of the same degree.
    """
    Q = np.asarray(Q, dtype=float)
    out = fol.copy()
    out.u0 = Q @ fol.u0
    out.u1 = np.einsum("ai,ijk->ajk", Q, fol.u1)
    out.unl = np.einsum("ai,ijk->ajk", Q, fol.unl)
    out.latent_ics = fol.latent_ics @ Q.T
    m = fol.map_exps.shape[0]
    Z = np.random.default_rng(0).uniform(-1, 1, (4 * m + 8, fol.d_Z))
    C = np.linalg.lstsq(eval_monomials(Z, fol.map_exps), eval_monomials(Z @ Q, fol.map_exps), rcond=None)[0]
    out.R = np.einsum("ai,ijk,lj->alk", Q, fol.R, C)
    return out


def eval_encoder(fol: Foliation, x_breve, x_perp, alpha):
    """Encoder with explicitly supplied complementary coordinates."""
    xb = np.atleast_2d(x_breve)
    xp = np.atleast_2d(x_perp)
    al = np.atleast_2d(alpha)
    if xb.shape[1] != fol.d_X or xp.shape[1] != len(fol.perp) or al.shape[1] != fol.n_Y:
        raise ValueError("dimension mismatch between inputs and foliation")
    z = np.einsum("ijk,nj,nk->ni", fol.u1, al, xb) + np.einsum("ij,nj->ni", fol.u0, al)
    if fol.unl.shape[2]:
        F = eval_monomials(xb, fol.feat_breve) * eval_monomials(xp, fol.feat_perp)
        z += np.einsum("ijf,nj,nf->ni", fol.unl, al, F)
    return z


def iterate_map(fol: Foliation, z0, alpha0, shift: ShiftOperator, steps, guard=1e6):
    """Apply r ``steps`` times, advancing alpha by Omega each step."""
    z = np.atleast_2d(np.asarray(z0, float))
    al = np.atleast_2d(np.asarray(alpha0, float))
    for k in range(steps):
        z = fol.conjugate_map(z, al)
        al = al @ shift.matrix.T
        if not np.all(np.isfinite(z)) or np.abs(z).max() > guard:
            raise DivergenceError(k + 1)
    return z[0] if np.ndim(z0) == 1 else z


# ---------------------------------------------------------------- loss


@dataclass
class Prepared:
    """Per-sample quantities that do not depend on foliation parameters."""

    x_breve: np.ndarray
    alpha: np.ndarray
    alpha_map: np.ndarray
    features: np.ndarray
    weights: np.ndarray
    norms: np.ndarray
    boundaries: np.ndarray
    epsilon: float


def prepare(fol: Foliation, data: TrajectorySet, config: LossConfig) -> Prepared:
    if not data.translated:
        raise ValueError("loss expects translated data")
    boundaries = data.boundaries
    states = data.states
    alpha = data.alphas(fol.library)
    if config.max_horizon:
        cuts = []
        for j in range(data.n_segments):
            a, b = boundaries[j], boundaries[j + 1]
            cuts += list(range(a, b, config.max_horizon))
        cuts.append(boundaries[-1])
        boundaries = np.unique(cuts)
        if np.any(np.diff(boundaries) < 1):
            raise ValueError("bad horizon")
    xb = fol.breve(states, alpha)
    norms = np.linalg.norm(states, axis=1)
    return Prepared(xb, alpha, fol.map_alpha(alpha), fol.features(xb),
                    sigma_eps(norms, config.epsilon), norms, np.asarray(boundaries), config.epsilon)


def encoded_ics(fol: Foliation, prep: Prepared):
    """Latent ICs from encoding the first sample of every prediction window."""
    first = prep.boundaries[:-1]
    return fol.encode(prep.x_breve[first], prep.alpha[first])


def with_encoded_ics(fol: Foliation, prep: Prepared):
    """``fol`` itself when its latent ICs match the windows of ``prep``, else a copy with encoded ICs."""
    if fol.latent_ics.shape[0] == len(prep.boundaries) - 1:
        return fol
    fol = fol.copy()
    fol.latent_ics = encoded_ics(fol, prep)
    return fol


def _simulate(fol, prep, want_jac, guard):
    """Latent predictions for all samples and (optionally) their sensitivities.

    Returns predictions (n, d_Z), flags of diverged samples, and for the
    Jacobian the sensitivity of each prediction to R (n, d_Z, R.size) and
    to its own segment's latent IC (n, d_Z, d_Z).
    """
    n = prep.x_breve.shape[0]
    dz = fol.d_Z
    zhat = np.zeros((n, dz))
    bad = np.zeros(n, dtype=bool)
    SR = np.zeros((n, dz, fol.R.size)) if want_jac else None
    Sz = np.zeros((n, dz, dz)) if want_jac else None
    b = prep.boundaries
    nseg = len(b) - 1
    starts = b[:-1]
    lens = np.diff(b)
    z = fol.latent_ics.copy()
    if z.shape[0] != nseg:
        raise ValueError(f"foliation has {z.shape[0]} latent ICs, data has {nseg} segments")
    sR = np.zeros((nseg, dz, fol.R.size))
    sz = np.broadcast_to(np.eye(dz), (nseg, dz, dz)).copy()
    alive = np.ones(nseg, dtype=bool)
    nR = fol.R.shape[2]
    for l in range(lens.max()):
        act = np.flatnonzero(l < lens)
        idx = starts[act] + l
        zhat[idx] = z[act]
        bad[idx] = ~alive[act]
        if want_jac:
            SR[idx] = sR[act]
            Sz[idx] = sz[act]
        if l + 1 >= lens.max():
            break
        nxt = act[l + 1 < lens[act]]
        nxt = nxt[alive[nxt]]
        if nxt.size == 0:
            continue
        ii = starts[nxt] + l
        zz = z[nxt]
        am = prep.alpha_map[ii]
        znew = fol.conjugate_map(zz, am)
        if want_jac:
            D = fol.map_jacobian(zz, am)
            phi = eval_monomials(zz, fol.map_exps)
            dR = np.zeros((len(nxt), dz, dz, phi.shape[1], nR))
            pa = phi[:, :, None] * am[:, None, :]
            for i in range(dz):
                dR[:, i, i] = pa
            sR[nxt] = D @ sR[nxt] + dR.reshape(len(nxt), dz, -1)
            sz[nxt] = D @ sz[nxt]
        z[nxt] = znew
        blown = nxt[~np.all(np.isfinite(znew), axis=1) | (np.abs(znew).max(axis=1) > guard)]
        alive[blown] = False
    return zhat, bad, SR, Sz


def residuals(fol: Foliation, prep: Prepared, guard=1e6, want_jac=False):
    """Weighted residual vector sqrt(sigma) (r^l(z_bar) - u(x)) and its Jacobian."""
    zhat, bad, SR, Sz = _simulate(fol, prep, want_jac, guard)
    u = fol.encode(prep.x_breve, prep.alpha)
    e = zhat - u
    e[bad] = guard
    w = np.sqrt(prep.weights)
    res = (w[:, None] * e)
    if not want_jac:
        return res, bad
    n, dz = e.shape
    al, xb, F = prep.alpha, prep.x_breve, prep.features
    sl = fol.block_slices()
    J = np.zeros((n, dz, sl["latent_ics"].stop))
    # encoder blocks: d(-u_i)/d u1[i, j, k] = -alpha_j xb_k
    ax = (al[:, :, None] * xb[:, None, :]).reshape(n, -1)
    af = (al[:, :, None] * F[:, None, :]).reshape(n, -1)
    u1 = np.zeros((n, dz, dz, ax.shape[1]))
    unl = np.zeros((n, dz, dz, af.shape[1]))
    for i in range(dz):
        u1[:, i, i] = -ax
        unl[:, i, i] = -af
    J[:, :, sl["u1"]] = u1.reshape(n, dz, -1)
    J[:, :, sl["unl"]] = unl.reshape(n, dz, -1)
    J[:, :, sl["R"]] = SR
    seg = np.repeat(np.arange(len(prep.boundaries) - 1), np.diff(prep.boundaries))
    zi = np.zeros((n, dz, fol.latent_ics.size))
    rows = np.arange(n)
    for c in range(dz):
        zi[rows, :, seg * dz + c] = Sz[:, :, c]
    J[:, :, sl["latent_ics"]] = zi
    J[bad] = 0
    J *= w[:, None, None]
    return res, bad, J


def loss(fol: Foliation, data: TrajectorySet, config: LossConfig, prep: Prepared | None = None):
    """L = 1/2 sum sigma |r^l(z_bar) - u(x)|^2 and per-sample weighted residual norms.

    Latent ICs that do not match the segments of ``data`` are replaced by
    the encoded first samples, as in :func:`relative_error`.
    """
    prep = prepare(fol, data, config) if prep is None else prep
    res, bad = residuals(with_encoded_ics(fol, prep), prep, config.guard)
    per = np.sum(res**2, axis=1)
    return 0.5 * float(per.sum()), per


def loss_and_grad(fol: Foliation, data: TrajectorySet, config: LossConfig, prep: Prepared | None = None):
    """Loss and its Euclidean gradient with respect to ``fol.get_params()``."""
    prep = prepare(fol, data, config) if prep is None else prep
    res, bad, J = residuals(with_encoded_ics(fol, prep), prep, config.guard, want_jac=True)
    r = res.ravel()
    Jm = J.reshape(r.size, -1)
    return 0.5 * float(r @ r), Jm.T @ r


def relative_error(fol: Foliation, data: TrajectorySet, config: LossConfig, bins=None,
                   prep: Prepared | None = None):
    """Per-sample (2/eps) sigma |r^l(z_bar) - u(x)|, optionally binned by |x|.

    Returns ``(E_rel, norms)`` or, with ``bins``, also a dict of bin
    centres, mean and max curves. When the foliation carries latent ICs
    for a different set of segments, the encoded first samples are used.
    """
    prep = prepare(fol, data, config) if prep is None else prep
    fol = with_encoded_ics(fol, prep)
    zhat, bad, _, _ = _simulate(fol, prep, False, config.guard)
    e = np.linalg.norm(zhat - fol.encode(prep.x_breve, prep.alpha), axis=1)
    e[bad] = np.inf
    E = 2.0 / prep.epsilon * prep.weights * e
    if bins is None:
        return E, prep.norms
    return E, prep.norms, amplitude_bins(prep.norms, E, bins)


def amplitude_bins(amplitude, values, bins):
    """Mean and max of ``values`` in amplitude bins (edges or a count)."""
    if np.isscalar(bins):
        edges = np.linspace(amplitude.min(), amplitude.max(), int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    k = np.clip(np.searchsorted(edges, amplitude, side="right") - 1, 0, len(edges) - 2)
    mean = np.full(len(edges) - 1, np.nan)
    mx = np.full(len(edges) - 1, np.nan)
    count = np.zeros(len(edges) - 1, dtype=int)
    for b in range(len(edges) - 1):
        v = values[k == b]
        count[b] = v.size
        if v.size:
            mean[b], mx[b] = v.mean(), v.max()
    return {"centers": 0.5 * (edges[1:] + edges[:-1]), "mean": mean, "max": mx, "count": count}
