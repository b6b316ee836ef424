"""Per-subsystem computations of one outer iteration.

Each agent assembles and factorizes its KKT block, condenses it into a
Schur contribution ``(S_i, s_i)`` for the coupling solve, recovers its own
step once ``dlam`` is known, and proposes local step size and barrier
surrogates.  Nothing here touches another agent's data.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import FactorizationError, InteriorViolationError
from .problem import evaluate_derivatives

__all__ = [
    "LocalKkt",
    "SchurContribution",
    "assemble_local_kkt",
    "factorize",
    "schur_contribution",
    "back_substitute",
    "local_fraction_to_boundary",
    "local_barrier_candidate",
    "coupled_columns",
    "pivots_ok",
    "PIVOT_TOL",
    "SPARSE_ORDER",
]

PIVOT_TOL = 1e-12
REG_START = 1e-8
REG_STEPS = 9
# local systems above this order are factorized with SuperLU
SPARSE_ORDER = 600


@dataclass
class LocalKkt:
    """Local KKT block laid out as rows/columns (x, v, gamma, mu).

    The slack row is the exact linearization of ``delta/v - mu`` with
    ``delta V^-2`` replaced by ``V^-1 M``, so the matrix is unsymmetric
    and factorized by pivoted LU.
    """

    matrix: np.ndarray
    n_x: int
    n_h: int
    n_g: int
    regularization_applied: float = 0.0
    index: int | None = None
    column_solves: int = 0
    _lu: object = field(default=None, repr=False)
    _sparse: bool = field(default=False, repr=False)

    @property
    def order(self):
        return self.matrix.shape[0]

    @property
    def factorized(self):
        return self._lu is not None

    def regularized_matrix(self):
        M = self.matrix.copy()
        if self.regularization_applied:
            idx = np.arange(self.n_x)
            M[idx, idx] += self.regularization_applied
        return M

    def solve(self, rhs):
        if self._lu is None:
            raise FactorizationError("local KKT has not been factorized", self.index)
        rhs = np.asarray(rhs, dtype=float)
        if self._sparse:
            return self._lu.solve(rhs)
        return la.lu_solve(self._lu, rhs, check_finite=False)


@dataclass
class SchurContribution:
    S: np.ndarray
    s: np.ndarray


def assemble_local_kkt(subsystem, point, index=None):
    """Assemble the block matrix of the local Newton system at ``point``."""
    if not point.is_interior():
        raise InteriorViolationError(f"subsystem {index}: v and mu must be strictly positive")
    n, ng, nh = subsystem.n_x, subsystem.n_g, subsystem.n_h
    _, dg, dh, hess = evaluate_derivatives(subsystem, point.x, point.gamma, point.mu, index)
    order = n + 2 * nh + ng
    M = np.zeros((order, order))
    iv, ig, im = n, n + nh, n + nh + ng
    M[:n, :n] = hess
    M[:n, ig:im] = dg.T
    M[:n, im:] = dh.T
    d = np.arange(nh)
    M[iv + d, iv + d] = -point.mu / point.v
    M[iv + d, im + d] = -1.0
    M[ig:im, :n] = dg
    M[im:, :n] = dh
    M[im + d, iv + d] = 1.0
    return LocalKkt(M, n, nh, ng, index=index)


def pivots_ok(pivots, colmax):
    """Every pivot must exceed ``PIVOT_TOL`` times the largest entry of its column."""
    return bool(np.all(colmax > 0) and np.all(np.abs(pivots) > PIVOT_TOL * colmax))


def _try_factor(M, use_sparse):
    """LU-factor ``M``; returns None when a pivot is below the relative threshold."""
    if not np.all(np.isfinite(M)):
        return None
    colmax = np.max(np.abs(M), axis=0, initial=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if use_sparse:
            try:
                lu = spla.splu(sp.csc_matrix(M))
            except RuntimeError:
                return None
            pivots = lu.U.diagonal()
            colmax = colmax[np.argsort(lu.perm_c)]
        else:
            lu = la.lu_factor(M, check_finite=False)
            pivots = np.diag(lu[0])
    return lu if pivots_ok(pivots, colmax) else None


def factorize(kkt, regularization=None):
    """Factorize in place, shifting the Hessian block by rho*I if (near) singular.

    With ``regularization`` given, that shift is applied directly instead
    of the escalation (used to reproduce an agent's factorization).
    """
    use_sparse = kkt.order > SPARSE_ORDER
    if regularization is not None:
        shifts = [regularization]
    else:
        shifts = [0.0] + [REG_START * 10.0 ** j for j in range(REG_STEPS)]
    for rho in shifts:
        kkt.regularization_applied = rho
        lu = _try_factor(kkt.regularized_matrix(), use_sparse)
        if lu is not None:
            kkt._lu = lu
            kkt._sparse = use_sparse
            return kkt
    kkt._lu = None
    raise FactorizationError(
        f"local KKT singular after regularization up to {shifts[-1]:g}", kkt.index
    )


def coupled_columns(A):
    """Coupling rows in which ``A_i`` has structural nonzeros."""
    A = sp.csr_matrix(A)
    return np.flatnonzero(np.diff(A.indptr) > 0)


def schur_contribution(kkt, A, F, Ax, b, n_agents):
    """``S_i = At K^-1 At'`` and ``s_i = A_i x_i - At K^-1 F_i - b/|S|``.

    Only the columns of ``At'`` with structural nonzeros are solved for.
    """
    A = sp.csr_matrix(A)
    n_c = A.shape[0]
    cols = coupled_columns(A)
    rhs = np.zeros((kkt.order, cols.size + 1))
    rhs[:kkt.n_x, :cols.size] = A[cols, :].T.toarray()
    rhs[:, -1] = F
    sol = kkt.solve(rhs)
    kkt.column_solves += cols.size
    S = np.zeros((n_c, n_c))
    if cols.size:
        block = A[cols, :] @ sol[:kkt.n_x, :cols.size]
        S[np.ix_(cols, cols)] = 0.5 * (block + block.T)
    s = Ax - A @ sol[:kkt.n_x, -1] - np.asarray(b, dtype=float) / n_agents
    return SchurContribution(S, s)


def back_substitute(kkt, F, A, dlam):
    """Recover ``dp_i = -K^-1 (F_i + At' dlam)``."""
    rhs = np.array(F, dtype=float)
    rhs[:kkt.n_x] += sp.csr_matrix(A).T @ dlam
    return -kkt.solve(rhs)


def _ratio_cap(z, dz, tau):
    neg = dz < 0
    if not np.any(neg):
        return 1.0
    with np.errstate(over="ignore"):
        return min(1.0, tau * float(np.min(-z[neg] / dz[neg])))


def local_fraction_to_boundary(point, step, tau):
    """Largest primal/dual step keeping ``v`` and ``mu`` above ``(1-tau)`` of their values."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    return _ratio_cap(point.v, step.v, tau), _ratio_cap(point.mu, step.mu, tau)


def local_barrier_candidate(point, sigma=0.1):
    nh = point.v.size
    if nh == 0:
        return 0.0
    return sigma * float(point.v @ point.mu) / nh
