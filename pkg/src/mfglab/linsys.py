"""Nearest-neighbour stencils on interior nodes and their linear solves.

Every implicit step in the package is a linear system whose matrix couples a
node only to its two neighbours along each axis.  A :class:`Stencil` keeps the
centre coefficient and one coefficient per neighbour as arrays over interior
nodes; boundary neighbours hold Dirichlet values and move to the right-hand
side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import bicgstab, spsolve


class LinearSolveError(RuntimeError):
    pass


@dataclass
class Stencil:
    center: np.ndarray
    minus: list
    plus: list

    @classmethod
    def zeros(cls, n, d):
        shape = (n,) * d
        return cls(np.zeros(shape), [np.zeros(shape) for _ in range(d)],
                   [np.zeros(shape) for _ in range(d)])

    @property
    def d(self):
        return self.center.ndim

    def add_laplacian(self, h, scale=1.0):
        """Add ``scale`` times the standard (2d+1)-point Laplacian."""
        self.center -= scale * 2.0 * self.d / h**2
        for a in range(self.d):
            self.minus[a] += scale / h**2
            self.plus[a] += scale / h**2
        return self

    def add_advection(self, b, h):
        """Add ``b . grad`` with central differences; ``b`` has shape (d, *interior)."""
        for a in range(self.d):
            self.minus[a] -= b[a] / (2.0 * h)
            self.plus[a] += b[a] / (2.0 * h)
        return self

    def apply(self, full):
        """Evaluate the stencil on a full-grid array, returning interior values."""
        d = self.d
        inner = (slice(1, -1),) * d
        out = self.center * full[inner]
        for a in range(d):
            lo = list(inner)
            hi = list(inner)
            lo[a] = slice(0, -2)
            hi[a] = slice(2, None)
            out = out + self.minus[a] * full[tuple(lo)] + self.plus[a] * full[tuple(hi)]
        return out


def boundary_contribution(stencil, full):
    """Stencil applied to ``full`` with its interior zeroed."""
    tmp = np.array(full, dtype=float, copy=True)
    tmp[(slice(1, -1),) * stencil.d] = 0.0
    return stencil.apply(tmp)


def _to_sparse(stencil):
    n = stencil.center.shape[0]
    N = stencil.center.size
    c = stencil.center.ravel()
    # axis 1 (fastest): offsets +-1, cut couplings across rows
    j = np.indices(stencil.center.shape)[1].ravel()
    p1 = np.where(j < n - 1, stencil.plus[1].ravel(), 0.0)[:-1]
    m1 = np.where(j > 0, stencil.minus[1].ravel(), 0.0)[1:]
    p0 = stencil.plus[0].ravel()[:-n]
    m0 = stencil.minus[0].ravel()[n:]
    return sp.diags([c, p1, m1, p0, m0], [0, 1, -1, n, -n], shape=(N, N), format="csr")


def solve_stencil(stencil, rhs, x0=None, tol=1e-10):
    """Solve ``stencil @ x = rhs`` on interior nodes (homogeneous boundary)."""
    if stencil.d == 1:
        ab = np.zeros((3, rhs.size))
        ab[0, 1:] = stencil.plus[0][:-1]
        ab[1] = stencil.center
        ab[2, :-1] = stencil.minus[0][1:]
        try:
            x = solve_banded((1, 1), ab, rhs, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveError(str(exc)) from exc
    else:
        A = _to_sparse(stencil)
        b = rhs.ravel()
        diag = A.diagonal()
        if np.any(diag == 0):
            raise LinearSolveError("zero on the diagonal")
        M = sp.diags(1.0 / diag)
        guess = None if x0 is None else np.ravel(x0)
        x, info = bicgstab(A, b, x0=guess, rtol=tol, atol=0.0, M=M, maxiter=2000)
        if info != 0:
            x = spsolve(A.tocsc(), b)
        x = x.reshape(rhs.shape)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("non-finite solution")
    return x
