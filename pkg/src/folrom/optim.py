"""Fitting foliations: bundle-based initialisation and a Levenberg-Marquardt
(trust-region Gauss-Newton) minimiser with an orthonormality-constrained
linear encoder block.

The constrained block is stepped in a tangent-space basis of the Stiefel
manifold and pulled back with the polar retraction after every step, so
the constraint holds to round-off at each accepted iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares

from . import linalg
from .data import TrajectorySet
from .foliation import Foliation, LossConfig, encoded_ics, prepare, residuals
from .linid import BundleSet

log = logging.getLogger(__name__)


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    max_iter: int = 100
    gtol: float = 1e-9
    xtol: float = 1e-12
    rtol: float = 1e-14
    mu0: float = 1e-3
    mu_max: float = 1e16


def initialize(bundles: BundleSet, index_set, enc_kind="generic", enc_order=1, map_order=1,
               autonomous_map=False, data: TrajectorySet | None = None) -> Foliation:
    """Linear foliation of the selected bundles.

    The encoder starts as the coordinate selection of the bundle rows
    (scaled by 1/sqrt(n_Y) for the reducible kind so the summed constraint
    holds), the map's linear part is Lambda of the selected bundles and the
    latent ICs are the encoded first samples of ``data``.
    """
    coords = bundles.rows(index_set)
    d = bundles.d_X
    lib = bundles.library
    n = lib.n_Y
    fol = Foliation(enc_kind, enc_order, coords, d, lib, bundles.breve_U, map_order, autonomous_map)
    E = np.eye(d)[coords]
    scale = 1.0 if fol.pointwise_constraint else 1.0 / np.sqrt(n)
    fol.u1 = np.repeat(E[:, None, :], n, axis=1) * scale
    dz = fol.d_Z
    lin = [int(np.flatnonzero(e)[0]) for e in fol.map_exps[:dz]]
    if autonomous_map:
        L = bundles.Lambda_nodes(index_set).mean(axis=0)
        fol.R[:, lin, 0] = L
    else:
        Lc = bundles.Lambda_coeffs(index_set)
        fol.R[:, lin, :] = np.transpose(Lc, (0, 2, 1))
    check_split([fol])
    if data is not None:
        set_latent_ics(fol, data)
    return fol


def check_split(fols, alpha_nodes=None, cond_max=1e10):
    """Full-rank check of the stacked linear encoders (and each u1 block)."""
    for f in fols:
        if f.constraint_residual() > 1e-8 or f.min_singular_value() < 0.5:
            raise ConstraintError(
                f"linear encoder block violates the orthonormality constraint "
                f"(residual {f.constraint_residual():.2e}, min singular value {f.min_singular_value():.2e})")
    if len(fols) > 1 or sum(f.d_Z for f in fols) == fols[0].d_X:
        lib = fols[0].library
        nodes = np.eye(lib.n_Y) if alpha_nodes is None else alpha_nodes
        for al in nodes:
            Q = np.vstack([np.einsum("ijk,j->ik", f.u1, al) for f in fols])
            if Q.shape[0] == Q.shape[1]:
                c = np.linalg.cond(Q)
                if c > cond_max:
                    raise ConstraintError(f"Q matrix is rank deficient (condition number {c:.2e})")


def set_latent_ics(fol: Foliation, data: TrajectorySet, loss: LossConfig | None = None):
    """Encoded first samples of each segment (or horizon window) as latent ICs."""
    fol.latent_ics = encoded_ics(fol, prepare(fol, data, loss or LossConfig()))
    return fol


def stiefel_tangent(X):
    """Orthonormal basis of the tangent space at X (rows orthonormal), shape (n_t, p, q)."""
    p, q = X.shape
    perp = linalg.real_nullspace_complement(X.T).T
    out = []
    for a in range(p):
        for b in range(a + 1, p):
            K = np.zeros((p, p))
            K[a, b], K[b, a] = 1.0, -1.0
            out.append(K @ X / np.sqrt(2))
    for a in range(p):
        for c in range(q - p):
            B = np.zeros((p, q - p))
            B[a, c] = 1.0
            out.append(B @ perp)
    return np.array(out).reshape(-1, p, q)


def _u1_tangent(fol):
    """Tangent basis of the u1 block as columns over u1.ravel()."""
    dz, n, dx = fol.u1.shape
    if fol.pointwise_constraint:
        cols = []
        for j in range(n):
            for D in stiefel_tangent(fol.u1[:, j, :]):
                full = np.zeros((dz, n, dx))
                full[:, j, :] = D
                cols.append(full.ravel())
        return np.array(cols).T
    T = stiefel_tangent(fol.u1.reshape(dz, n * dx))
    return T.reshape(len(T), -1).T


def retract(fol, delta_u1):
    """Polar retraction of u1 + delta back onto the constraint set."""
    dz, n, dx = fol.u1.shape
    U = fol.u1 + delta_u1.reshape(dz, n, dx)
    if fol.pointwise_constraint:
        for j in range(n):
            U[:, j, :] = linalg.polar_factor(U[:, j, :])
    else:
        U = linalg.polar_factor(U.reshape(dz, n * dx)).reshape(dz, n, dx)
    return U


@dataclass
class History:
    step: list = field(default_factory=list)
    L_train: list = field(default_factory=list)
    L_test: list = field(default_factory=list)
    gradnorm: list = field(default_factory=list)
    constraint: list = field(default_factory=list)
    status: str = ""

    def record(self, step, Ltr, Lte, g, c):
        self.step.append(step)
        self.L_train.append(Ltr)
        self.L_test.append(Lte)
        self.gradnorm.append(g)
        self.constraint.append(c)

    @property
    def accepted_steps(self):
        return len(self.step) - 1

    def rows(self):
        return list(zip(self.step, self.L_train, self.L_test, self.gradnorm, self.constraint))


def fit_latent_ics(fol: Foliation, data: TrajectorySet, loss: LossConfig = LossConfig(), prep=None, ics0=None):
    """Copy of ``fol`` whose latent ICs best fit ``data`` with u and r held fixed.

    This gives held-out trajectories the same treatment as training
    trajectories, whose ICs are optimisation unknowns. Starts from the
    encoded first samples unless ``ics0`` is given.
    """
    f = fol.copy()
    prep = prepare(f, data, loss) if prep is None else prep
    f.latent_ics = encoded_ics(f, prep) if ics0 is None else np.array(ics0, dtype=float)
    sl = f.block_slices()["latent_ics"]
    shape = f.latent_ics.shape

    def fun(p):
        f.latent_ics = p.reshape(shape)
        return residuals(f, prep, loss.guard)[0].ravel()

    def jac(p):
        f.latent_ics = p.reshape(shape)
        J = residuals(f, prep, loss.guard, want_jac=True)[2]
        return J.reshape(-1, J.shape[-1])[:, sl]

    sol = least_squares(fun, f.latent_ics.ravel(), jac=jac, method="lm", xtol=1e-14, ftol=1e-14)
    f.latent_ics = sol.x.reshape(shape)
    return f


class _TestSet:
    """Held-out loss with fitted latent ICs, warm-started between calls."""

    def __init__(self, fol, data, loss):
        self.data, self.loss = data, loss
        self.prep = None if data is None else prepare(fol, data, loss)
        self.ics = None

    def __call__(self, fol):
        if self.data is None:
            return float("nan")
        f = fit_latent_ics(fol, self.data, self.loss, self.prep, self.ics)
        res, bad = residuals(f, self.prep, self.loss.guard)
        if not bad.any():
            self.ics = f.latent_ics
        return 0.5 * float(np.sum(res**2))


def minimize(fol: Foliation, data_train: TrajectorySet, data_test: TrajectorySet | None = None,
             config: OptimConfig = OptimConfig()):
    """Minimise the trajectory loss; returns the fitted copy and its history."""
    fol = fol.copy()
    check_split([fol])
    prep = prepare(fol, data_train, config.loss)
    if fol.latent_ics.shape[0] != len(prep.boundaries) - 1:
        fol.latent_ics = encoded_ics(fol, prep)
    guard = config.loss.guard
    sl = fol.block_slices()
    hist = History()
    mu = config.mu0
    nu = 2.0
    res, bad, J = residuals(fol, prep, guard, want_jac=True)
    r = res.ravel()
    L = 0.5 * float(r @ r)
    test_loss = _TestSet(fol, data_test, config.loss)
    u_scale = np.sqrt(np.sum(prep.weights[:, None] * fol.encode(prep.x_breve, prep.alpha) ** 2))
    for it in range(config.max_iter + 1):
        Jm = J.reshape(r.size, -1)
        T = _u1_tangent(fol)
        Jr = np.hstack([Jm[:, sl["u1"]] @ T, Jm[:, sl["u1"].stop:]])
        g = Jr.T @ r
        gn = float(np.linalg.norm(g))
        hist.record(it, L, test_loss(fol), gn, fol.constraint_residual())
        if it == 0:
            g0 = max(gn, np.finfo(float).tiny)
        if np.sqrt(2 * L) <= config.rtol * max(u_scale, 1e-300):
            hist.status = "residual below tolerance"
            break
        if gn <= config.gtol * g0:
            hist.status = "gradient below tolerance"
            break
        if it == config.max_iter:
            hist.status = "iteration cap"
            break
        H = Jr.T @ Jr
        dH = np.diag(H).copy()
        dH = np.maximum(dH, 1e-12 * max(dH.max(), 1e-300))
        accepted = False
        while mu <= config.mu_max:
            try:
                step = np.linalg.solve(H + mu * np.diag(dH), -g)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            pred = -(g @ step + 0.5 * step @ H @ step)
            trial = fol.copy()
            nt = T.shape[1]
            trial.u1 = retract(fol, T @ step[:nt])
            p = trial.get_params()
            p[sl["u1"].stop:] += step[nt:]
            trial.set_params(p)
            res_t, bad_t = residuals(trial, prep, guard)
            Lt = 0.5 * float(np.sum(res_t**2))
            rho = (L - Lt) / pred if pred > 0 else -1.0
            if Lt < L and np.isfinite(Lt) and not bad_t.any():
                fol = trial
                mu *= max(1 / 3, 1 - (2 * rho - 1) ** 3) if rho > 0 else 1.0
                nu = 2.0
                accepted = True
                break
            mu *= nu
            nu *= 2
        if not accepted:
            hist.status = "trust region underflow (stalled at best iterate)"
            break
        small_step = np.linalg.norm(step) <= config.xtol * (np.linalg.norm(fol.get_params()) + config.xtol)
        res, bad, J = residuals(fol, prep, guard, want_jac=True)
        r = res.ravel()
        L = 0.5 * float(r @ r)
        if small_step:
            Jm = J.reshape(r.size, -1)
            hist.record(it + 1, L, test_loss(fol),
                        float(np.linalg.norm(Jm.T @ r)), fol.constraint_residual())
            hist.status = "step below tolerance"
            break
        log.debug("step %d  L=%.6e  mu=%.2e", it + 1, L, mu)
    return fol, hist


def minimize_continued(fol: Foliation, data_train: TrajectorySet, data_test: TrajectorySet | None = None,
                       config: OptimConfig = OptimConfig(), horizons=(None,)):
    """Run :func:`minimize` over a schedule of prediction horizons.

    Short windows give a smoother loss far from the optimum; each stage
    starts from the previous fit with re-encoded latent ICs. Histories are
    concatenated with continuing step numbers.
    """
    hist = History()
    for h in horizons:
        cfg = replace(config, loss=replace(config.loss, max_horizon=h))
        f = fol.copy()
        f.latent_ics = np.zeros((0, fol.d_Z))
        fol, hs = minimize(f, data_train, data_test, cfg)
        off = hist.step[-1] + 1 if hist.step else 0
        for row in hs.rows():
            hist.record(row[0] + off, *row[1:])
        hist.status = hs.status
    return fol, hist
