"""Linear identification: DMD baselines, the forcing-dependent linear model,
its stationary state and invariant vector bundles.

Bundle and model tensors are kept in two forms. *Coefficient* form multiplies
library values, e.g. ``A(theta) = A[:, j, :] * psi_j(theta)``. *Nodal* form
holds values at the library nodes. The two agree for cardinal libraries.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment

from . import linalg
from .basis import FunctionLibrary, ShiftOperator, nodal_shift
from .data import TrajectorySet, translate


class SteadyStateError(np.linalg.LinAlgError):
    pass


class ClusteringError(RuntimeError):
    pass


class DeadModeError(ValueError):
    pass


# ---------------------------------------------------------------- DMD


@dataclass(frozen=True)
class DMDResult:
    A: np.ndarray
    eigvals: np.ndarray
    left_eigvecs: np.ndarray
    semisimple: bool = True


def dmd_fit(X, Y, cond_max=1e8) -> DMDResult:
    """A0 = Y X^T (X X^T)^+ with eigen-decomposition A0 = V^-1 diag(lam) V.

    Rows of ``left_eigvecs`` are left eigenvectors. If A0 is not safely
    diagonalisable the real Schur basis is returned instead (rows of Z^T,
    ``semisimple=False``) and the eigenvalues come from the Schur form.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise ValueError("X and Y must have the same shape")
    A = Y @ X.T @ np.linalg.pinv(X @ X.T)
    lam, V = linalg.left_eig(A)
    order = np.lexsort((-lam.imag, -np.abs(lam)))
    lam, V = lam[order], V[order]
    if np.linalg.cond(V) > cond_max:
        warnings.warn("DMD matrix is close to defective; returning Schur basis")
        T, Z = sla.schur(A, output="real")
        ev = np.linalg.eigvals(T)
        return DMDResult(A, ev[np.argsort(-np.abs(ev))], Z.T, False)
    return DMDResult(A, lam, V, True)


def _real_rows(lam, V):
    rows = []
    k = 0
    while k < len(lam):
        if abs(lam[k].imag) > 1e-12 * max(1.0, abs(lam[k])):
            rows += [V[k].real, V[k].imag]
            k += 2
        else:
            rows.append(V[k].real)
            k += 1
    return np.array(rows)


def _direct_residual(V, X, Y):
    VX, VY = V @ X, V @ Y
    A = VY @ VX.T @ np.linalg.pinv(VX @ VX.T)
    return A, (A @ VX - VY).ravel()


def dmd_direct(X, Y, m, V0=None, max_iter=200, tol=1e-12):
    """Minimise |A V X - V Y|^2 over A and row-orthonormal V (m x d_X).

    A is eliminated in closed form; V is updated by Levenberg-Marquardt steps
    on the Grassmann manifold with a polar retraction. Returns
    ``(A_r, V_r, info)``; ``info["converged"]`` is False if the iteration cap
    was hit, in which case the best iterate is returned.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    d = X.shape[0]
    if m > d:
        raise ValueError(f"m={m} exceeds state dimension {d}")
    if V0 is None:
        res = dmd_fit(X, Y)
        lam = res.eigvals
        if m < d and abs(lam[m - 1].imag) > 1e-12 and np.isclose(lam[m], np.conj(lam[m - 1])):
            raise ValueError(f"m={m} splits a complex conjugate pair")
        rows = _real_rows(lam, res.left_eigvecs)[:m] if res.semisimple else res.left_eigvecs[:m].real
        V0 = rows
    V = np.linalg.qr(np.asarray(V0, dtype=float).T)[0].T
    A, r = _direct_residual(V, X, Y)
    f = r @ r
    mu = 1e-3
    converged = m == d
    it = 0
    for it in range(max_iter):
        if converged:
            break
        perp = linalg.real_nullspace_complement(V.T).T
        nk = m * (d - m)
        h = 1e-7
        J = np.empty((r.size, nk))
        for c in range(nk):
            K = np.zeros(nk)
            K[c] = h
            Vp = linalg.polar_factor(V + K.reshape(m, d - m) @ perp)
            Vm = linalg.polar_factor(V - K.reshape(m, d - m) @ perp)
            J[:, c] = (_direct_residual(Vp, X, Y)[1] - _direct_residual(Vm, X, Y)[1]) / (2 * h)
        g = J.T @ r
        if np.linalg.norm(g) <= tol * max(1.0, np.sqrt(f)):
            converged = True
            break
        H = J.T @ J
        while True:
            step = np.linalg.solve(H + mu * (np.diag(np.diag(H)) + 1e-14 * np.eye(nk)), -g)
            Vn = linalg.polar_factor(V + step.reshape(m, d - m) @ perp)
            An, rn = _direct_residual(Vn, X, Y)
            fn = rn @ rn
            if fn < f:
                V, A, r, f = Vn, An, rn, fn
                mu = max(mu / 3, 1e-12)
                break
            mu *= 4
            if mu > 1e12:
                converged = True
                break
        if np.linalg.norm(step) < tol:
            converged = True
    return A, V, {"converged": converged, "iterations": it, "objective": f}


# ---------------------------------------------------------------- linear model


@dataclass
class LinearSkewModel:
    """x+ = A(theta) x + b(theta) with A, b in coefficient form."""

    A: np.ndarray
    b: np.ndarray
    library: FunctionLibrary
    shift: ShiftOperator
    steady: np.ndarray = None

    def __post_init__(self):
        if self.steady is None:
            self.steady = solve_steady(self.A, self.b, self.library, self.shift)

    @property
    def d_X(self):
        return self.A.shape[0]

    @property
    def n_Y(self):
        return self.A.shape[1]

    def A_at(self, alpha):
        return np.einsum("ijk,...j->...ik", self.A, alpha)

    def b_at(self, alpha):
        return np.einsum("ij,...j->...i", self.b, alpha)

    def steady_at(self, alpha):
        return np.einsum("ij,...j->...i", self.steady, alpha)

    @property
    def A_nodes(self):
        """Nodal values, shape (n_Y, d_X, d_X)."""
        return np.einsum("imk,lm->lik", self.A, self.library.nodal_matrix)

    @property
    def omega_nodes(self):
        return nodal_shift(self.library, self.shift)

    @classmethod
    def from_nodes(cls, A_nodes, library, shift, b_nodes=None):
        """Build from nodal values A(node_l) (and optionally b(node_l))."""
        A_nodes = np.asarray(A_nodes, dtype=float)
        Pinv = np.linalg.inv(library.nodal_matrix)
        A = np.einsum("lik,jl->ijk", A_nodes, Pinv)
        if b_nodes is None:
            b = np.zeros(A.shape[:2])
        else:
            b = np.einsum("li,jl->ij", np.asarray(b_nodes, dtype=float), Pinv)
        return cls(A, b, library, shift)

    def steady_residual(self):
        """Max collocation residual of s(g theta) = A(theta) s(theta) + b(theta)."""
        P = self.library.nodal_matrix
        S = self.steady @ P.T
        lhs = S @ self.omega_nodes
        rhs = np.einsum("lik,kl->il", self.A_nodes, S) + self.b @ P.T
        return np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max())


def solve_steady(A, b, library, shift, cond_max=1e13):
    """Stationary state in coefficient form by collocation at library nodes.

    Solves B s = b with B_(il)(kj) = delta_ik Om_jl - A_ilk delta_jl.
    """
    d, n = A.shape[0], A.shape[1]
    P = library.nodal_matrix
    Om = nodal_shift(library, shift)
    An = np.einsum("imk,lm->lik", A, P)
    bn = b @ P.T
    B = np.einsum("ik,jl->ilkj", np.eye(d), Om) - np.einsum("lik,jl->ilkj", An, np.eye(n))
    B = B.reshape(d * n, d * n)
    if np.linalg.cond(B) > cond_max:
        raise SteadyStateError("stationary-state solve singular: eigenvalue of A(theta) "
                               "collides with spectrum of Omega")
    S = np.linalg.solve(B, bn.reshape(-1)).reshape(d, n)
    return np.linalg.solve(P, S.T).T


def fit_linear_model(data: TrajectorySet, lib: FunctionLibrary, shift: ShiftOperator) -> LinearSkewModel:
    """Least-squares fit of x_{k+1} = A(theta_k) x_k + b(theta_k) within segments."""
    if data.translated:
        raise ValueError("fit_linear_model expects untranslated data")
    d, n = data.d_X, lib.n_Y
    alphas = data.alphas(lib)
    G = np.zeros((n * (d + 1), n * (d + 1)))
    C = np.zeros((n * (d + 1), d))
    # segment-ordered accumulation keeps the reduction deterministic
    for j in range(data.n_segments):
        s = data.segment(j)
        x, al = data.states[s], alphas[s]
        xa = np.hstack([x[:-1], np.ones((len(x) - 1, 1))])
        Phi = (al[:-1, :, None] * xa[:, None, :]).reshape(len(x) - 1, -1)
        G += Phi.T @ Phi
        C += Phi.T @ x[1:]
    try:
        W = np.linalg.solve(G, C)
        if not np.all(np.isfinite(W)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        warnings.warn("normal equations singular; using minimum-norm solution")
        W = linalg.lstsq(G, C)
    W = W.reshape(n, d + 1, d)
    A = np.transpose(W[:, :d, :], (2, 0, 1))
    b = W[:, d, :].T
    return LinearSkewModel(A.copy(), b.copy(), lib, shift)


# ---------------------------------------------------------------- bundles


@dataclass
class BundleSet:
    """Invariant vector bundles selected from the discretised eigenproblem.

    ``eigvecs[r]`` holds the nodal values (n_Y, d_X) of the r-th sorted
    eigenvector; complex pairs come first with the positive-imaginary member
    leading. ``bundle_eigvals[j]`` holds nodal eigenvalues (n_Y,) of the
    j-th bundle (constant for torus libraries). ``breve_U`` is the scaled
    real encoder in coefficient form, ``x_breve = breve_U[:, j, :] alpha_j x``.
    """

    eigvals: np.ndarray
    eigvecs: np.ndarray
    n_complex: int
    bundle_eigvals: np.ndarray
    bundle_rows: list
    scales: np.ndarray
    blocks: list
    breve_U: np.ndarray
    library: FunctionLibrary
    shift: ShiftOperator
    dt: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def d_X(self):
        return self.breve_U.shape[0]

    @property
    def m_sigma(self):
        return len(self.bundle_rows)

    def rows(self, index_set):
        return [r for j in sorted(index_set) for r in self.bundle_rows[j]]

    def breve_U_at(self, alpha):
        return np.einsum("ijk,...j->...ik", self.breve_U, alpha)

    def breve_W_at(self, alpha):
        return np.linalg.inv(self.breve_U_at(alpha))

    def Lambda_nodes(self, index_set=None):
        """Block-diagonal Lambda at library nodes, shape (n_Y, m, m)."""
        js = range(self.m_sigma) if index_set is None else sorted(index_set)
        sizes = [self.blocks[j].shape[1] for j in js]
        n = self.library.n_Y
        out = np.zeros((n, sum(sizes), sum(sizes)))
        o = 0
        for j, s in zip(js, sizes):
            out[:, o:o + s, o:o + s] = self.blocks[j]
            o += s
        return out

    def Lambda_coeffs(self, index_set=None):
        """Lambda in coefficient form, shape (m, n_Y, m)."""
        L = self.Lambda_nodes(index_set)
        Pinv = np.linalg.inv(self.library.nodal_matrix)
        return np.einsum("lik,jl->ijk", L, Pinv)

    def intervals(self):
        """Spectral intervals [alpha_j, beta_j] of |lambda| per bundle."""
        m = np.abs(self.bundle_eigvals)
        return np.stack([m.min(axis=1), m.max(axis=1)], axis=1)

    def continuous(self, dt=None):
        dt = self.dt if dt is None else dt
        return np.log(self.eigvals.astype(complex)) / dt

    def report(self, index_sets=(), dt=None, order_cap=7):
        dt = self.dt if dt is None else dt
        out = {
            "eigenvalues": [[float(l.real), float(l.imag)] for l in self.eigvals],
            "magnitudes": [float(abs(l)) for l in self.eigvals],
            "spectral_intervals": self.intervals().tolist(),
            "scales": self.scales.tolist(),
        }
        if dt:
            out["continuous"] = [[float(l.real), float(l.imag)] for l in self.continuous(dt)]
        qs = []
        for I in index_sets:
            q = {"index_set": list(I), "quotient": float(spectral_quotient(self, I))}
            q["resonance"] = check_nonresonance(self, I, order_cap).to_dict()
            qs.append(q)
        out["spectral_quotients"] = qs
        return out


def _phase_normalize(v):
    k = np.argmax(np.abs(v))
    return v * (np.conj(v[k]) / abs(v[k]))


def _adjacency(U):
    """Phase-aligned adjacency between eigenvectors, U of shape (N, n_Y, d)."""
    nu = np.linalg.norm(U, axis=2)
    safe = np.where(nu > 0, nu, 1.0)
    Uh = U / safe[:, :, None]
    # per node |<U_p, U_q>| after normalisation
    overlap = np.abs(np.einsum("pij,qij->pqi", Uh, np.conj(Uh)))
    w = nu[:, None, :] ** 2 * nu[None, :, :] ** 2
    return np.sum(w * (2 - 2 * np.minimum(overlap, 1.0)), axis=2)


def _greedy_clusters(Adj, size):
    N = Adj.shape[0]
    free = list(range(N))
    clusters = []
    while free:
        if len(free) < size:
            raise ClusteringError(f"cluster histogram: {[len(c) for c in clusters] + [len(free)]}")
        sub = Adj[np.ix_(free, free)]
        srt = np.sort(sub, axis=1)
        tight = srt[:, :size].sum(axis=1)
        total = sub.sum(axis=1)
        seed = np.lexsort((total, tight))[0]
        members = np.argsort(sub[seed], kind="stable")[:size]
        if seed not in members:
            members = np.concatenate([[seed], members[:-1]])
        chosen = [free[m] for m in members]
        clusters.append(sorted(chosen))
        free = [f for f in free if f not in chosen]
    return clusters


def _total_variation(U):
    return np.abs(np.diff(U, axis=0)).sum()


def _is_real(lam, tol=1e-10):
    return abs(lam.imag) <= tol * max(1.0, abs(lam))


def _bundles_torus(Om, An):
    n, d = An.shape[0], An.shape[1]
    M = np.einsum("il,ljt->ijlt", Om, An).reshape(n * d, n * d)
    lam, V = linalg.left_eig(M)
    V = np.array([_phase_normalize(v) for v in V]).reshape(-1, n, d)
    clusters = _greedy_clusters(_adjacency(V), n)
    cluster_of = np.empty(len(lam), dtype=int)
    for c, mem in enumerate(clusters):
        cluster_of[mem] = c
    tv = np.array([_total_variation(v) for v in V])
    reps = []
    done = set()
    for c, mem in enumerate(clusters):
        if c in done:
            continue
        p = mem[int(np.argmin(tv[mem]))]
        # conjugate partner: the eigenvector closest to conj(V_p)
        cand = np.abs(lam - np.conj(lam[p]))
        cand = cand + np.array([np.abs(np.abs(np.vdot(np.conj(V[p]), V[q])) - 1) for q in range(len(lam))])
        q = int(np.argmin(cand))
        c2 = cluster_of[q]
        if c2 == c:
            reals = [m for m in mem if _is_real(lam[m])]
            if reals:
                p = reals[int(np.argmin(tv[reals]))]
            v = _phase_normalize(V[p].ravel()).reshape(n, d)
            reps.append((lam[p].real + 0j, v.real.astype(complex)))
            done.add(c)
        else:
            both = mem + clusters[c2]
            p = both[int(np.argmin(tv[both]))]
            if _is_real(lam[p]):
                reps.append((lam[p].real + 0j, V[p].real.astype(complex)))
            else:
                lp, vp = (lam[p], V[p]) if lam[p].imag > 0 else (np.conj(lam[p]), np.conj(V[p]))
                reps.append((lp, vp))
            done.update([c, c2])
    modes = [(np.full(n, l), v) for l, v in reps]
    diag = {"clusters": clusters, "cluster_spread": [float(np.ptp(np.abs(lam[m]))) for m in clusters]}
    return modes, diag


def _bundles_pointwise(An):
    """Per-node eigen-decomposition for g = id, modes matched across nodes."""
    n, d = An.shape[0], An.shape[1]
    per = [linalg.left_eig(An[l]) for l in range(n)]
    ref = n // 2
    lam = np.empty((n, d), dtype=complex)
    vec = np.empty((n, d, d), dtype=complex)
    lam[ref], vec[ref] = per[ref]
    order = list(range(ref + 1, n)) + list(range(ref - 1, -1, -1))
    for l in order:
        prev = l - 1 if l > ref else l + 1
        lo, Vo = per[l]
        cost = np.abs(lam[prev][:, None] - lo[None, :]) + (1 - np.abs(np.conj(vec[prev]) @ Vo.T))
        r, c = linear_sum_assignment(cost)
        lam[l, r] = lo[c]
        vec[l, r] = Vo[c]
        for p in range(d):
            ph = np.vdot(vec[prev, p], vec[l, p])
            vec[l, p] *= np.conj(ph) / abs(ph)
    modes = []
    used = set()
    for p in range(d):
        if p in used:
            continue
        lp = lam[:, p]
        if np.all([_is_real(x, 1e-8) for x in lp]):
            v = np.array([_phase_normalize(vec[l, p]) for l in range(n)])
            for l in range(1, n):
                if np.vdot(v[l - 1].real, v[l].real) < 0:
                    v[l] = -v[l]
            modes.append((lp.real + 0j, v.real + 0j))
            used.add(p)
            continue
        q = int(np.argmin([np.abs(lam[ref, k] - np.conj(lam[ref, p])) if k != p else np.inf for k in range(d)]))
        used.update([p, q])
        if lp[ref].imag < 0:
            p = q
        modes.append((lam[:, p], vec[:, p]))
    return modes, {"pointwise": True}


def solve_bundles(model: LinearSkewModel, data: TrajectorySet | None = None, scales=None,
                  dt=None) -> BundleSet:
    """Invariant left bundles of the linear model, sorted and scaled.

    ``data`` (translated or not) sets the scales nu_i = sqrt(d_X) max|x_breve_i|.
    Without data and without explicit ``scales`` the scales are 1.
    """
    lib = model.library
    Om = model.omega_nodes
    An = model.A_nodes
    n, d = lib.n_Y, model.d_X
    if n > 1 and np.allclose(Om, np.eye(n), atol=1e-12):
        modes, diag = _bundles_pointwise(An)
    else:
        modes, diag = _bundles_torus(Om, An)
    if sum(1 if _is_real(l[0]) else 2 for l, _ in modes) != d:
        raise ClusteringError("selected bundles do not span the state space")

    def key(m):
        return -np.mean(np.abs(m[0]))

    cpx = sorted([m for m in modes if not _is_real(m[0][0])], key=key)
    rea = sorted([m for m in modes if _is_real(m[0][0])], key=key)
    eigvals, eigvecs, rows_nodal, bundle_rows, bundle_lam = [], [], [], [], []
    for l, v in cpx:
        r0 = len(rows_nodal)
        eigvals += [l[0], np.conj(l[0])]
        eigvecs += [v, np.conj(v)]
        rows_nodal += [v.real, v.imag]
        bundle_rows.append([r0, r0 + 1])
        bundle_lam.append(l)
    for l, v in rea:
        eigvals.append(l[0])
        eigvecs.append(v)
        rows_nodal.append(v.real)
        bundle_rows.append([len(rows_nodal) - 1])
        bundle_lam.append(l)
    rows_nodal = np.array(rows_nodal)
    Pinv = np.linalg.inv(lib.nodal_matrix)
    U_coef = np.einsum("rlk,jl->rjk", rows_nodal, Pinv)
    if scales is None:
        if data is None:
            scales = np.ones(d)
        else:
            if not data.translated:
                data = translate(data, model.steady, lib)
            xb = np.einsum("rjk,nj,nk->nr", U_coef, data.alphas(lib), data.states)
            scales = np.sqrt(d) * np.abs(xb).max(axis=0)
    scales = np.asarray(scales, dtype=float)
    dead = np.flatnonzero(scales <= 1e-12 * scales.max())
    if dead.size:
        raise DeadModeError(f"mode coordinate {int(dead[0])} is absent from the data (zero scale)")
    blocks = []
    for lam_n, rows in zip(bundle_lam, bundle_rows):
        if len(rows) == 2:
            a, b = scales[rows]
            B = np.empty((n, 2, 2))
            B[:, 0, 0] = lam_n.real
            B[:, 1, 1] = lam_n.real
            B[:, 0, 1] = -(b / a) * lam_n.imag
            B[:, 1, 0] = (a / b) * lam_n.imag
        else:
            B = lam_n.real.reshape(n, 1, 1).copy()
        blocks.append(B)
    breve_U = U_coef / scales[:, None, None]
    residual = max(_bundle_residual(Om, An, l, v) for l, v in modes)
    diag["bundle_residual"] = residual
    return BundleSet(np.array(eigvals), np.array(eigvecs), 2 * len(cpx), np.array(bundle_lam),
                     bundle_rows, scales, blocks, breve_U, lib, model.shift, dt, diag)


def _bundle_residual(Om, An, lam, V):
    """max over nodes of |U(g node_l) A(node_l) - lam U(node_l)| relative to |A|."""
    lhs = np.einsum("il,ljt,ij->lt", Om, An, V)
    return np.abs(lhs - lam[:, None] * V).max() / max(1.0, np.abs(An).max())


# ---------------------------------------------------------------- Theorem checks


def spectral_quotient(bundles: BundleSet, index_set) -> float:
    """min_{j in I} log(alpha_j) / log(beta_slowest) from the spectral intervals."""
    I = sorted(index_set)
    if not I:
        raise ValueError("index set is empty")
    iv = bundles.intervals()
    if np.any(iv[:, 1] >= 1):
        raise ValueError("spectral quotient needs all |lambda| < 1")
    if np.any(iv[I, 0] == 0):
        raise ValueError("spectral interval endpoint alpha_j = 0 in the index set")
    return float(np.min(np.log(iv[I, 0])) / np.log(iv[:, 1].max()))


@dataclass
class ResonanceReport:
    index_set: list
    quotient: float
    max_order: int
    truncated: bool
    external: list
    internal: list

    @property
    def resonant(self):
        return bool(self.external)

    def to_dict(self):
        return {
            "index_set": list(self.index_set),
            "quotient": self.quotient,
            "max_order": self.max_order,
            "truncated": self.truncated,
            "external": [{"i0": i0, "indices": list(ix)} for i0, ix in self.external],
            "internal": [{"i0": i0, "indices": list(ix)} for i0, ix in self.internal],
        }


def check_nonresonance(bundles: BundleSet, index_set, order_cap=7, tol=1e-9) -> ResonanceReport:
    """Enumerate the product conditions for 2 <= j < quotient + 1.

    A condition (i0; i1..ij) is violated when 1 lies in
    [beta_i0^-1 alpha_i1..alpha_ij, alpha_i0^-1 beta_i1..beta_ij].
    Conditions with some i_k outside I are external; the rest are internal
    resonances that must stay in the conjugate map.
    """
    I = sorted(index_set)
    q = spectral_quotient(bundles, I)
    iv = np.log(bundles.intervals())
    needed = int(np.ceil(q + 1)) - 1
    jmax = min(needed, order_cap)
    ext, inn = [], []
    for j in range(2, jmax + 1):
        for combo in itertools.combinations_with_replacement(range(bundles.m_sigma), j):
            lo_sum = iv[list(combo), 0].sum()
            hi_sum = iv[list(combo), 1].sum()
            for i0 in I:
                lo = lo_sum - iv[i0, 1]
                hi = hi_sum - iv[i0, 0]
                if lo <= tol and hi >= -tol:
                    (inn if set(combo) <= set(I) else ext).append((i0, combo))
    return ResonanceReport(I, q, jmax, needed > order_cap, ext, inn)
