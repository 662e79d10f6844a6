"""Dense linear algebra kernels shared by the other modules.

Everything works in 64-bit floats. Complex numbers appear only inside the
eigen-solvers; callers convert eigenvectors to real blocks themselves.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True)
class ContractionSpec:
    """Parsed index pattern for :func:`contract`.

    The pattern uses einsum letters. A letter that appears in several
    operands and in the output is *held*: it is matched across operands but
    not summed over. Held letters can be flagged explicitly with a trailing
    underscore in an operand, e.g. ``"ijk,jl_,kl_->il"``, which is then
    validated.
    """

    operands: tuple[str, ...]
    output: str
    held: frozenset[str]

    @classmethod
    def parse(cls, pattern: str) -> "ContractionSpec":
        pattern = pattern.replace(" ", "")
        if "->" not in pattern:
            raise ValueError("contraction pattern needs an explicit '->' output")
        lhs, out = pattern.split("->")
        raw = lhs.split(",")
        held = set()
        ops = []
        for term in raw:
            if not re.fullmatch(r"([a-zA-Z]_?)*", term):
                raise ValueError(f"bad operand pattern {term!r}")
            held.update(m[0] for m in re.findall(r"([a-zA-Z])_", term))
            ops.append(term.replace("_", ""))
        if "_" in out:
            raise ValueError("output indices cannot be underlined")
        letters = set("".join(ops))
        for c in out:
            if c not in letters:
                raise ValueError(f"output index {c!r} does not appear in any operand")
        if len(set(out)) != len(out):
            raise ValueError("repeated output index")
        for c in held:
            if sum(c in op for op in ops) < 2:
                raise ValueError(f"held index {c!r} must appear in at least two operands")
            if c not in out:
                raise ValueError(f"held index {c!r} must appear in the output")
        return cls(tuple(ops), out, frozenset(held))

    @property
    def einsum(self) -> str:
        return ",".join(self.operands) + "->" + self.output


def contract(spec, *tensors):
    """Einstein contraction with held (underlined) indices.

    Letters absent from the output are summed; letters present in the output
    are kept, even when they occur in several operands.

    >>> A = np.ones((2, 3, 4)); v = np.ones((3, 5)); w = np.ones((4, 5))
    >>> contract("ijk,jl_,kl_->il", A, v, w).shape
    (2, 5)
    """
    if isinstance(spec, str):
        spec = ContractionSpec.parse(spec)
    if len(tensors) != len(spec.operands):
        raise ValueError(f"expected {len(spec.operands)} tensors, got {len(tensors)}")
    sizes = {}
    for n, (op, t) in enumerate(zip(spec.operands, tensors)):
        t = np.asarray(t)
        if t.ndim != len(op):
            raise ValueError(f"operand {n} has {t.ndim} axes, pattern {op!r} needs {len(op)}")
        for c, s in zip(op, t.shape):
            if sizes.setdefault(c, s) != s:
                raise ValueError(f"shape mismatch on index {c!r}: {sizes[c]} vs {s}")
    return np.einsum(spec.einsum, *tensors, optimize=True)


def left_eig(M):
    """Eigenvalues and left eigenvectors of a square matrix.

    Returns ``(lam, V)`` where row ``V[p]`` satisfies ``V[p] @ M = lam[p] * V[p]``
    (plain transpose, no conjugation) and has unit 2-norm.
    """
    M = np.asarray(M)
    lam, vl = sla.eig(M, left=True, right=False)
    V = np.conj(vl).T
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    return lam, V


def svd(M):
    """Thin SVD, ``M = U @ diag(s) @ Vt``."""
    return np.linalg.svd(np.asarray(M, dtype=float), full_matrices=False)


def lstsq(A, b, rcond=None):
    """Minimum-norm least-squares solution of ``A x = b``."""
    return sla.lstsq(np.asarray(A), np.asarray(b), cond=rcond)[0]


def polar_factor(M):
    """Closest matrix with orthonormal rows (for wide M) in Frobenius norm."""
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    return U @ Vt


def real_nullspace_complement(Q):
    """Orthonormal basis (columns) of the orthogonal complement of range(Q)."""
    Q = np.atleast_2d(Q)
    full, _ = np.linalg.qr(np.hstack([Q, np.eye(Q.shape[0])]))
    return full[:, Q.shape[1]:]


def cheb_lobatto(n, a=0.0, b=1.0):
    """Chebyshev-Lobatto points on [a, b], increasing, n >= 2 points."""
    k = np.arange(n)
    x = -np.cos(np.pi * k / (n - 1))
    return a + (b - a) * (x + 1) / 2


def cheb_first_kind(n, a=-1.0, b=1.0):
    """Chebyshev points of the first kind on [a, b], increasing."""
    if n == 1:
        return np.array([(a + b) / 2])
    k = np.arange(n)
    x = -np.cos((2 * k + 1) * np.pi / (2 * n))
    return a + (b - a) * (x + 1) / 2


def bary_weights(nodes):
    """Barycentric weights for arbitrary distinct nodes, normalised to max 1."""
    nodes = np.asarray(nodes, dtype=float)
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / np.prod(diff, axis=1)
    return w / np.abs(w).max()


def bary_matrix(nodes, x, weights=None):
    """Interpolation matrix P with P @ f(nodes) = p(x) for the interpolant p."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = bary_weights(nodes) if weights is None else weights
    d = x[:, None] - nodes[None, :]
    hit = d == 0.0
    d[hit] = 1.0
    P = w[None, :] / d
    P /= P.sum(axis=1, keepdims=True)
    rows = hit.any(axis=1)
    P[rows] = hit[rows].astype(float)
    return P


def bary_diff_matrix(nodes, x, weights=None):
    """Matrix mapping nodal values to derivatives of the interpolant at x."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = bary_weights(nodes) if weights is None else weights
    D = diff_matrix(nodes, w)
    out = np.empty((len(x), len(nodes)))
    for m, xm in enumerate(x):
        d = xm - nodes
        k = np.flatnonzero(d == 0.0)
        if k.size:
            out[m] = D[k[0]]
            continue
        # derivative of the barycentric formula p = (sum w f / d) / (sum w / d)
        s = w / d
        S = s.sum()
        s2 = w / d**2
        S2 = s2.sum()
        out[m] = (-s2 * S + s * S2) / S**2
    return out


def diff_matrix(nodes, weights=None):
    """Collocation differentiation matrix on arbitrary nodes."""
    nodes = np.asarray(nodes, dtype=float)
    w = bary_weights(nodes) if weights is None else weights
    c = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(c, 1.0)
    D = (w[None, :] / w[:, None]) / c
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def dirichlet(x, n):
    """Dirichlet kernel sin(n x / 2) / sin(x / 2) for odd n, equal to n at 0."""
    x = np.asarray(x, dtype=float)
    m = (n - 1) // 2
    k = np.arange(1, m + 1)
    return 1.0 + 2.0 * np.cos(np.multiply.outer(x, k)).sum(axis=-1)


def dirichlet_deriv(x, n):
    """Derivative of :func:`dirichlet` with respect to x."""
    x = np.asarray(x, dtype=float)
    m = (n - 1) // 2
    k = np.arange(1, m + 1)
    return -2.0 * (k * np.sin(np.multiply.outer(x, k))).sum(axis=-1)


def fourier_nodes(n):
    """Uniform grid 2 pi j / n, j = 0..n-1."""
    return 2 * np.pi * np.arange(n) / n


def fourier_matrix(n, x):
    """Trigonometric interpolation matrix on the uniform n-grid (n odd)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return dirichlet(x[:, None] - fourier_nodes(n)[None, :], n) / n


def fourier_diff_matrix(n, x=None):
    """Derivative of the trigonometric interpolant, evaluated at x (default nodes)."""
    x = fourier_nodes(n) if x is None else np.atleast_1d(np.asarray(x, dtype=float))
    return dirichlet_deriv(x[:, None] - fourier_nodes(n)[None, :], n) / n
