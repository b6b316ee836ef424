"""Centralized reference computations.

The full arrowhead KKT system is assembled from the same local blocks the
agents build and solved by sparse LU.  ``solve_centralized_barrier_newton``
runs the identical outer iteration with that direct solve in place of the
Schur/CG path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import agent
from .coordination import MessageBus
from .driver import SolverOptions, run_interior_point
from .errors import FactorizationError
from .problem import PartitionedNlp, Subsystem, SubsystemPoint, objective

__all__ = [
    "FullKkt",
    "assemble_full_kkt",
    "direct_newton_step",
    "solve_centralized_barrier_newton",
    "solve_centralized_nlp",
    "CentralizedResult",
]


@dataclass
class FullKkt:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    offsets: np.ndarray
    sizes: list
    n_c: int
    local_blocks: list

    @property
    def order(self):
        return self.matrix.shape[0]


def assemble_full_kkt(problem, points, lam, delta, regularization=None):
    """Block-diagonal local KKT matrices bordered by ``[A_i 0 0 0]``.

    ``regularization`` optionally gives a Hessian shift per subsystem.
    """
    from .driver import _Residuals

    res = _Residuals(problem, points, lam)
    blocks, rows, rhs, sizes = [], [], [], []
    for i, (sub, pt) in enumerate(zip(problem.subsystems, points)):
        kkt = agent.assemble_local_kkt(sub, pt, i)
        if regularization is not None and regularization[i]:
            kkt.regularization_applied = float(regularization[i])
        blocks.append(kkt)
        sizes.append((sub.n_x, sub.n_h, sub.n_g, sub.n_h))
        pad = sp.csr_matrix((problem.n_c, kkt.order - sub.n_x))
        rows.append(sp.hstack([sub.A, pad]))
        rhs.append(-res.newton_residual(i, delta))
    diag = sp.block_diag([sp.csr_matrix(k.regularized_matrix()) for k in blocks])
    border = sp.hstack(rows) if rows else sp.csr_matrix((problem.n_c, 0))
    if problem.n_c:
        M = sp.bmat([[diag, border.T], [border, sp.csr_matrix((problem.n_c, problem.n_c))]],
                    format="csc")
    else:
        M = sp.csc_matrix(diag)
    rhs.append(res.coupling)
    offsets = np.cumsum([0] + [k.order for k in blocks])
    return FullKkt(M, np.concatenate(rhs), offsets, sizes, problem.n_c, blocks)


def _factor(M):
    colmax = np.asarray(abs(M).max(axis=0).todense()).ravel()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            lu = spla.splu(M)
        except RuntimeError:
            return None
    return lu if agent.pivots_ok(lu.U.diagonal(), colmax[np.argsort(lu.perm_c)]) else None


def direct_newton_step(full):
    """Solve the full system; returns per-subsystem steps and ``dlam``.

    A singular matrix is retried with the agents' escalating Hessian shift
    applied to every block simultaneously.
    """
    lu = _factor(full.matrix)
    rho = 0.0
    if lu is None:
        shift_idx = np.concatenate(
            [np.arange(o, o + s[0]) for o, s in zip(full.offsets[:-1], full.sizes)])
        for j in range(agent.REG_STEPS):
            rho = agent.REG_START * 10.0 ** j
            D = sp.csc_matrix((np.full(shift_idx.size, rho), (shift_idx, shift_idx)),
                              shape=full.matrix.shape)
            lu = _factor(full.matrix + D)
            if lu is not None:
                break
        else:
            raise FactorizationError("full KKT singular after regularization")
    sol = lu.solve(full.rhs)
    steps = []
    for o, (n, nh, ng, _) in zip(full.offsets[:-1], full.sizes):
        steps.append(SubsystemPoint.from_stacked(sol[o:o + n + 2 * nh + ng], n, ng, nh))
    return steps, sol[full.offsets[-1]:], rho


class DirectStep:
    def __call__(self, points, lam, delta, residuals, forcing_norm):
        full = assemble_full_kkt(self.problem, points, lam, delta)
        steps, dlam, rho = direct_newton_step(full)
        return steps, dlam, {"inner": 0, "inner_tol": 0.0, "cg_residual": 0.0,
                             "inexact": False, "regularization": rho}

    def __init__(self, problem):
        self.problem = problem


@dataclass
class CentralizedResult:
    x: np.ndarray
    f: float
    status: object
    result: object

    @property
    def converged(self):
        return self.result.converged

    @property
    def reference(self):
        return self.x, self.f


def solve_centralized_barrier_newton(problem, options=None, initial=None):
    """Reference solution ``(x*, f*)``; default tolerance 1e-8 on ``||F^0||``."""
    options = options or SolverOptions(tol=1e-8)
    bus = MessageBus(problem.n_agents, keep_log=False)
    res = run_interior_point(problem, options, DirectStep(problem), bus, initial)
    f = objective(problem, [p.x for p in res.points])
    return CentralizedResult(res.x, f, res.status, res)


def solve_centralized_nlp(subsystem: Subsystem, options=None, initial=None):
    """Solve a single uncoupled NLP with the same iteration."""
    problem = PartitionedNlp([subsystem], np.zeros(0), allow_uncoupled=True)
    return solve_centralized_barrier_newton(problem, options, initial)
