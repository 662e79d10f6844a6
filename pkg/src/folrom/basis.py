"""Function libraries over the forcing or parameter space.

Two kinds are supported:

* ``torus-dirichlet``: cardinal Dirichlet kernels on a uniform tensor grid of
  a d-torus, ``psi_j(theta) = prod_d gamma(theta_d - node_jd) / n_d``.
* ``interval-polynomial``: polynomials of degree < n_Y on an interval.
  The default representation is the Lagrange basis on Chebyshev points of
  the first kind; ``"chebyshev"`` (scaled Chebyshev polynomials) and
  ``"monomial"`` (raw powers) are available.

An autonomous system is the interval library with ``n_Y = 1``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import linalg


class ExtrapolationWarning(UserWarning):
    """Raised when a parameter library is evaluated outside its interval."""


class RankDeficiencyError(ValueError):
    """Least-squares shift fit with an ill-conditioned Gram matrix."""

    def __init__(self, msg, deficient_dim):
        super().__init__(msg)
        self.deficient_dim = deficient_dim


@dataclass(frozen=True)
class FunctionLibrary:
    kind: str
    grid_sizes: tuple[int, ...]
    domain: tuple[float, float] = (0.0, 2 * np.pi)
    basis: str = "lagrange"

    def __post_init__(self):
        object.__setattr__(self, "grid_sizes", tuple(int(n) for n in self.grid_sizes))
        if self.kind == "torus-dirichlet":
            for n in self.grid_sizes:
                if n < 3 or n % 2 == 0:
                    raise ValueError(f"torus grid sizes must be odd and >= 3, got {n}")
        elif self.kind == "interval-polynomial":
            if len(self.grid_sizes) != 1 or self.grid_sizes[0] < 1:
                raise ValueError("interval library takes a single positive size")
            if self.basis not in ("lagrange", "chebyshev", "monomial"):
                raise ValueError(f"unknown interval basis {self.basis!r}")
            a, b = self.domain
            if not b > a:
                raise ValueError("interval domain needs a < b")
        else:
            raise ValueError(f"unknown library kind {self.kind!r}")

    @classmethod
    def torus(cls, *grid_sizes):
        return cls("torus-dirichlet", tuple(grid_sizes))

    @classmethod
    def interval(cls, n, a, b, basis="lagrange"):
        return cls("interval-polynomial", (n,), (float(a), float(b)), basis)

    @classmethod
    def autonomous(cls):
        return cls("interval-polynomial", (1,), (0.0, 1.0), "lagrange")

    @property
    def total_size(self):
        return int(np.prod(self.grid_sizes))

    n_Y = total_size

    @property
    def dim(self):
        """Dimension of the forcing space (number of angles or 1)."""
        return len(self.grid_sizes) if self.kind == "torus-dirichlet" else 1

    @property
    def is_torus(self):
        return self.kind == "torus-dirichlet"

    @property
    def is_cardinal(self):
        return self.is_torus or self.basis == "lagrange"

    @cached_property
    def nodes(self):
        """Library nodes, shape (n_Y, dim)."""
        if self.is_torus:
            axes = [linalg.fourier_nodes(n) for n in self.grid_sizes]
            grid = np.meshgrid(*axes, indexing="ij")
            return np.stack([g.ravel() for g in grid], axis=1)
        a, b = self.domain
        return linalg.cheb_first_kind(self.n_Y, a, b)[:, None]

    def _factors(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1, len(self.grid_sizes))
        out = []
        for d, n in enumerate(self.grid_sizes):
            x = theta[:, d:d + 1] - linalg.fourier_nodes(n)[None, :]
            out.append(linalg.dirichlet(x, n) / n)
        return out

    def __call__(self, theta):
        return eval_library(self, theta)

    @cached_property
    def nodal_matrix(self):
        """P with P[m, j] = psi_j(node_m); the identity for cardinal bases."""
        if self.is_cardinal:
            return np.eye(self.n_Y)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            return eval_library(self, self.nodes)


def _kron_rows(factors):
    out = factors[0]
    for f in factors[1:]:
        out = (out[:, :, None] * f[:, None, :]).reshape(out.shape[0], -1)
    return out


def eval_library(lib: FunctionLibrary, theta):
    """Evaluate all basis functions at theta.

    ``theta`` is a point (shape ``(dim,)`` or scalar) or a batch
    ``(n, dim)``. Returns ``(n_Y,)`` or ``(n, n_Y)`` accordingly.
    """
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 0 if lib.dim == 1 else theta.ndim == 1
    if lib.is_torus:
        alpha = _kron_rows(lib._factors(theta))
    else:
        t = theta.reshape(-1)
        a, b = lib.domain
        tol = 1e-12 * (b - a)
        if np.any((t < a - tol) | (t > b + tol)):
            warnings.warn(f"parameter outside [{a}, {b}]", ExtrapolationWarning, stacklevel=2)
        n = lib.n_Y
        if n == 1:
            alpha = np.ones((t.size, 1))
        elif lib.basis == "monomial":
            alpha = t[:, None] ** np.arange(n)[None, :]
        elif lib.basis == "chebyshev":
            s = (2 * t - a - b) / (b - a)
            alpha = np.polynomial.chebyshev.chebvander(s, n - 1)
        else:
            alpha = linalg.bary_matrix(lib.nodes[:, 0], t)
    return alpha[0] if single else alpha


@dataclass(frozen=True)
class ShiftOperator:
    """Linear action of the forcing map on the library, Psi(g(theta)) = Omega Psi(theta)."""

    omega_matrix: np.ndarray
    source: str
    factors: tuple = field(default=(), compare=False)

    @property
    def matrix(self):
        return self.omega_matrix

    def unitarity_error(self):
        O = self.omega_matrix
        return np.abs(O.T @ O - np.eye(O.shape[0])).max()

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n), "identity")


def _rotation_1d(n, w):
    nodes = linalg.fourier_nodes(n)
    return linalg.dirichlet(nodes[None, :] + w - nodes[:, None], n) / n


def rotation_shift(lib: FunctionLibrary, omega) -> ShiftOperator:
    """Shift operator of the rigid rotation theta -> theta + omega."""
    if not lib.is_torus:
        raise TypeError("rotation_shift needs a torus library")
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.size != lib.dim:
        raise ValueError(f"rotation vector has {omega.size} entries, torus has {lib.dim}")
    factors = tuple(_rotation_1d(n, w) for n, w in zip(lib.grid_sizes, omega))
    M = factors[0]
    for f in factors[1:]:
        M = np.kron(M, f)
    return ShiftOperator(M, "analytic-rotation", factors)


def pair_indices(boundaries):
    """Indices k such that (k, k+1) lie in the same segment."""
    b = np.asarray(boundaries)
    return np.concatenate([np.arange(b[j], b[j + 1] - 1) for j in range(len(b) - 1)])


def fit_shift_lsq(alphas, boundaries, cond_max=1e12) -> ShiftOperator:
    """Least-squares shift from consecutive library evaluations within segments."""
    alphas = np.asarray(alphas, dtype=float)
    k = pair_indices(boundaries)
    X, Y = alphas[k], alphas[k + 1]
    G = X.T @ X
    s = np.linalg.svd(G, compute_uv=False)
    if s[0] == 0 or s[0] / max(s[-1], np.finfo(float).tiny) > cond_max:
        deficient = int(np.sum(s <= s[0] / cond_max)) if s[0] > 0 else len(s)
        raise RankDeficiencyError(
            f"shift Gram matrix is rank deficient: {deficient} of {len(s)} directions "
            f"unresolved by {len(k)} sample pairs",
            deficient,
        )
    C = Y.T @ X
    return ShiftOperator(np.linalg.solve(G.T, C.T).T, "least-squares")


def nodal_shift(lib: FunctionLibrary, shift: ShiftOperator):
    """Shift in nodal form, so that s(g(node_l)) = sum_m S[:, m] Om[m, l] for nodal values S."""
    P = lib.nodal_matrix
    if lib.is_cardinal:
        return shift.matrix
    return np.linalg.solve(P.T, shift.matrix @ P.T)
