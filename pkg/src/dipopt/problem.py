"""Partially separable NLPs with affine coupling.

An instance is a list of subsystems, each with its own objective ``f_i``,
equalities ``g_i(x_i) = 0`` and inequalities ``h_i(x_i) <= 0``, tied
together by ``sum_i A_i x_i = b``.  Evaluators supply values and analytic
first and second derivatives.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EvaluationError, InstanceError, InteriorViolationError

__all__ = [
    "Evaluator",
    "QuadraticEvaluator",
    "Subsystem",
    "SubsystemPoint",
    "PartitionedNlp",
    "KktResidual",
    "DerivativeReport",
    "evaluate",
    "evaluate_derivatives",
    "check_derivatives_fd",
    "kkt_residual",
    "local_residual_blocks",
    "evaluate_gradients",
    "newton_residual",
    "consensus_violation",
    "objective",
    "load_pnlp",
    "dump_pnlp",
    "pnlp_to_dict",
]

PNLP_FORMAT = "pnlp-v1"


class Evaluator(Protocol):
    def values(self, x: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        ...

    def derivatives(
        self, x: np.ndarray, gamma: np.ndarray, mu: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (grad f, jac g, jac h, hess of f + gamma'g + mu'h)."""
        ...


class QuadraticEvaluator:
    """``f = 1/2 x'Hx + c'x + c0`` with affine ``g = Gx + g0``, ``h = Jx + h0``."""

    def __init__(self, H, c, G=None, g0=None, J=None, h0=None, c0=0.0):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.c = np.asarray(c, dtype=float).ravel()
        n = self.c.size
        if self.H.shape != (n, n):
            raise InstanceError(f"H has shape {self.H.shape}, expected {(n, n)}")
        self.H = 0.5 * (self.H + self.H.T)
        self.c0 = float(c0)
        self.G = _affine_matrix(G, n, "G")
        self.g0 = _affine_offset(g0, self.G.shape[0], "g0")
        self.J = _affine_matrix(J, n, "J")
        self.h0 = _affine_offset(h0, self.J.shape[0], "h0")

    @property
    def n_x(self):
        return self.c.size

    def values(self, x):
        f = 0.5 * x @ self.H @ x + self.c @ x + self.c0
        return f, self.G @ x + self.g0, self.J @ x + self.h0

    def derivatives(self, x, gamma, mu):
        return self.H @ x + self.c, self.G.copy(), self.J.copy(), self.H.copy()

    def initial_x(self):
        return np.zeros(self.n_x)


def _affine_matrix(M, n, name):
    if M is None:
        return np.zeros((0, n))
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return np.zeros((0, n))
    M = np.atleast_2d(M)
    if M.shape[1] != n:
        raise InstanceError(f"{name} has {M.shape[1]} columns, expected {n}")
    return M


def _affine_offset(v, m, name):
    if v is None:
        return np.zeros(m)
    v = np.asarray(v, dtype=float).ravel()
    if v.size != m:
        raise InstanceError(f"{name} has length {v.size}, expected {m}")
    return v


@dataclass
class Subsystem:
    """One agent's private data: dimensions, evaluator and coupling block A_i."""

    n_x: int
    n_g: int
    n_h: int
    evaluator: Evaluator
    A: sp.csr_matrix
    name: str = ""

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        if self.A.shape[1] != self.n_x:
            raise InstanceError(
                f"A has {self.A.shape[1]} columns but subsystem has n_x={self.n_x}"
            )

    @property
    def kkt_order(self):
        return self.n_x + 2 * self.n_h + self.n_g

    @classmethod
    def quadratic(cls, H, c, A, G=None, g0=None, J=None, h0=None, c0=0.0, name=""):
        ev = QuadraticEvaluator(H, c, G, g0, J, h0, c0)
        return cls(ev.n_x, ev.G.shape[0], ev.J.shape[0], ev, A, name)


@dataclass
class SubsystemPoint:
    """Primal-dual iterate ``p_i = (x_i, v_i, gamma_i, mu_i)``."""

    x: np.ndarray
    v: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).ravel()
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        self.mu = np.asarray(self.mu, dtype=float).ravel()

    def stacked(self):
        return np.concatenate([self.x, self.v, self.gamma, self.mu])

    @classmethod
    def from_stacked(cls, p, n_x, n_g, n_h):
        p = np.asarray(p, dtype=float)
        i1, i2, i3 = n_x, n_x + n_h, n_x + n_h + n_g
        return cls(p[:i1], p[i1:i2], p[i2:i3], p[i3:i3 + n_h])

    def copy(self):
        return SubsystemPoint(self.x.copy(), self.v.copy(), self.gamma.copy(), self.mu.copy())

    def is_interior(self):
        return bool(np.all(self.v > 0) and np.all(self.mu > 0))


@dataclass
class PartitionedNlp:
    """``min sum f_i(x_i)`` s.t. local constraints and ``sum A_i x_i = b``."""

    subsystems: list[Subsystem]
    b: np.ndarray
    partition: object = None
    allow_uncoupled: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.subsystems = list(self.subsystems)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if not self.subsystems:
            raise InstanceError("problem has no subsystems")
        if self.n_c == 0 and not self.allow_uncoupled:
            raise InstanceError(
                "coupling dimension is zero: the problem is fully separable, "
                "solve the subsystems independently"
            )
        for i, sub in enumerate(self.subsystems):
            if sub.A.shape[0] != self.n_c:
                raise InstanceError(
                    f"subsystem {i} has A with {sub.A.shape[0]} rows, expected n_c={self.n_c}"
                )

    @property
    def n_c(self):
        return self.b.size

    @property
    def n_agents(self):
        return len(self.subsystems)

    @property
    def n_x(self):
        return sum(s.n_x for s in self.subsystems)

    def split(self, x):
        """Split a concatenated primal vector into per-subsystem pieces."""
        offsets = np.cumsum([0] + [s.n_x for s in self.subsystems])
        if len(x) != offsets[-1]:
            raise InstanceError(f"x has length {len(x)}, expected {offsets[-1]}")
        return [np.asarray(x[a:b], dtype=float) for a, b in zip(offsets[:-1], offsets[1:])]

    def coupling_product(self, xs):
        total = np.zeros(self.n_c)
        for sub, x in zip(self.subsystems, xs):
            total += sub.A @ x
        return total


@dataclass
class KktResidual:
    """Blocks of F^delta: per subsystem (stationarity, complementarity, g, h+v), plus coupling."""

    blocks: list[np.ndarray]
    coupling: np.ndarray
    inf_norm: float
    sizes: list[tuple[int, int, int, int]]

    def stationarity(self, i):
        return self.blocks[i][: self.sizes[i][0]]

    def complementarity(self, i):
        n, nh, _, _ = self.sizes[i]
        return self.blocks[i][n:n + nh]

    def local_inf_norms(self):
        return [float(np.max(np.abs(b), initial=0.0)) for b in self.blocks]


def _check_finite(arr, what, index):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite {what}", subsystem=index)


def evaluate(subsystem, x, index=None):
    """Values ``(f, g, h)`` exactly as the evaluator returns them."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size != subsystem.n_x:
        raise InstanceError(f"x has length {x.size}, subsystem expects {subsystem.n_x}")
    f, g, h = subsystem.evaluator.values(x)
    g = np.asarray(g, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    if g.size != subsystem.n_g or h.size != subsystem.n_h:
        raise InstanceError(
            f"evaluator returned g/h of length {g.size}/{h.size}, "
            f"declared {subsystem.n_g}/{subsystem.n_h}"
        )
    f = float(f)
    _check_finite(np.r_[f, g, h], "value", index)
    return f, g, h


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a, dtype=float)


def evaluate_derivatives(subsystem, x, gamma, mu, index=None):
    """``(grad f, jac g, jac h, hess L)`` with the Hessian symmetrized."""
    n, ng, nh = subsystem.n_x, subsystem.n_g, subsystem.n_h
    x = np.asarray(x, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if x.size != n or gamma.size != ng or mu.size != nh:
        raise InstanceError("point dimensions do not match the subsystem")
    df, dg, dh, hess = subsystem.evaluator.derivatives(x, gamma, mu)
    df = np.asarray(df, dtype=float).ravel()
    dg = _dense(dg).reshape(ng, n)
    dh = _dense(dh).reshape(nh, n)
    hess = _dense(hess).reshape(n, n)
    hess = 0.5 * (hess + hess.T)
    for arr, what in ((df, "gradient"), (dg, "equality Jacobian"),
                      (dh, "inequality Jacobian"), (hess, "Hessian")):
        _check_finite(arr, what, index)
    return df, dg, dh, hess


@dataclass
class DerivativeReport:
    deviations: dict
    tol: float

    @property
    def passed(self):
        return all(d <= self.tol for d in self.deviations.values())

    def __str__(self):
        lines = [f"{k:>12s}: {v:.3e}" for k, v in self.deviations.items()]
        lines.append(f"{'result':>12s}: {'pass' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(lines)


def _rel_dev(fd, exact):
    if exact.size == 0:
        return 0.0
    return float(np.max(np.abs(fd - exact)) / (1.0 + np.max(np.abs(exact))))


def check_derivatives_fd(subsystem, x, gamma, mu, tol=1e-6, step=1e-7):
    """Compare analytic derivatives with central finite differences."""
    x = np.asarray(x, dtype=float).ravel()
    n = subsystem.n_x
    df, dg, dh, hess = evaluate_derivatives(subsystem, x, gamma, mu)
    fd_f = np.zeros(n)
    fd_g = np.zeros((subsystem.n_g, n))
    fd_h = np.zeros((subsystem.n_h, n))
    fd_hess = np.zeros((n, n))

    def lagrangian_gradient(z):
        gf, jg, jh, _ = evaluate_derivatives(subsystem, z, gamma, mu)
        return gf + jg.T @ gamma + jh.T @ mu

    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        fp, gp, hp = evaluate(subsystem, x + e)
        fm, gm, hm = evaluate(subsystem, x - e)
        fd_f[j] = (fp - fm) / (2 * step)
        fd_g[:, j] = (gp - gm) / (2 * step)
        fd_h[:, j] = (hp - hm) / (2 * step)
        fd_hess[:, j] = (lagrangian_gradient(x + e) - lagrangian_gradient(x - e)) / (2 * step)
    deviations = {
        "grad_f": _rel_dev(fd_f, df),
        "jac_g": _rel_dev(fd_g, dg),
        "jac_h": _rel_dev(fd_h, dh),
        "hess_L": _rel_dev(fd_hess, hess),
    }
    return DerivativeReport(deviations, tol)


def evaluate_gradients(subsystem, x, index=None):
    """``(grad f, jac g, jac h)``; skips the Hessian when the evaluator allows it."""
    ev = subsystem.evaluator
    if hasattr(ev, "gradients"):
        n = subsystem.n_x
        df, dg, dh = ev.gradients(np.asarray(x, dtype=float))
        df = np.asarray(df, dtype=float).ravel()
        dg = _dense(dg).reshape(subsystem.n_g, n)
        dh = _dense(dh).reshape(subsystem.n_h, n)
        for arr, what in ((df, "gradient"), (dg, "equality Jacobian"), (dh, "inequality Jacobian")):
            _check_finite(arr, what, index)
        return df, dg, dh
    zeros_g, zeros_h = np.zeros(subsystem.n_g), np.zeros(subsystem.n_h)
    return evaluate_derivatives(subsystem, x, zeros_g, zeros_h, index)[:3]


def local_residual_blocks(subsystem, point, lam, delta, index=None):
    """Per-subsystem residual pieces; complementarity in product form ``delta - v*mu``."""
    _, g, h = evaluate(subsystem, point.x, index)
    df, dg, dh = evaluate_gradients(subsystem, point.x, index)
    stat = df + dg.T @ point.gamma + dh.T @ point.mu + subsystem.A.T @ lam
    comp = delta - point.v * point.mu
    return stat, comp, g, h + point.v


def newton_residual(subsystem, point, lam, delta, index=None):
    """F_i^delta as it enters the Newton system, slack row scaled by V^{-1}.

    The slack row reads ``delta/v - mu``; its linearization is the
    ``[0, -V^{-1}M, 0, -I]`` row assembled by the local agent.
    """
    stat, comp, g, hv = local_residual_blocks(subsystem, point, lam, delta, index)
    return np.concatenate([stat, comp / point.v, g, hv])


def _require_interior(points):
    for i, pt in enumerate(points):
        if not pt.is_interior():
            raise InteriorViolationError(f"subsystem {i}: slacks and multipliers must be > 0")


def kkt_residual(problem, points, lam, delta):
    """Evaluate F^delta(p); ``delta=0`` gives the termination residual F^0."""
    if delta < 0:
        raise ValueError("barrier parameter must be nonnegative")
    _require_interior(points)
    lam = np.asarray(lam, dtype=float)
    blocks, sizes = [], []
    for i, (sub, pt) in enumerate(zip(problem.subsystems, points)):
        blocks.append(np.concatenate(local_residual_blocks(sub, pt, lam, delta, i)))
        sizes.append((sub.n_x, sub.n_h, sub.n_g, sub.n_h))
    coupling = problem.b - problem.coupling_product([pt.x for pt in points])
    inf_norm = max([float(np.max(np.abs(b), initial=0.0)) for b in blocks]
                   + [float(np.max(np.abs(coupling), initial=0.0))])
    return KktResidual(blocks, coupling, inf_norm, sizes)


def consensus_violation(problem, x):
    """``||sum_i A_i x_i - b||_inf`` for a concatenated (or pre-split) primal vector."""
    xs = x if isinstance(x, (list, tuple)) else problem.split(np.asarray(x, dtype=float))
    r = problem.coupling_product(xs) - problem.b
    return float(np.max(np.abs(r), initial=0.0))


def objective(problem, xs):
    return sum(evaluate(sub, x, i)[0] for i, (sub, x) in enumerate(zip(problem.subsystems, xs)))


# -- pnlp-v1 serialization -------------------------------------------------

def _triplets(A):
    coo = sp.coo_matrix(A)
    return {"rows": coo.row.tolist(), "cols": coo.col.tolist(), "vals": coo.data.tolist()}


def pnlp_to_dict(problem):
    """Structure of an instance as a pnlp-v1 document.

    Quadratic subsystems are written in full; other evaluators contribute
    only their dimensions and coupling triplets.
    """
    subs = []
    for sub in problem.subsystems:
        entry = {"name": sub.name, "n_x": sub.n_x, "n_g": sub.n_g, "n_h": sub.n_h,
                 "A": _triplets(sub.A)}
        ev = sub.evaluator
        if isinstance(ev, QuadraticEvaluator):
            entry["objective"] = {"H": ev.H.tolist(), "c": ev.c.tolist(), "c0": ev.c0}
            entry["eq"] = {"matrix": ev.G.tolist(), "offset": ev.g0.tolist()}
            entry["ineq"] = {"matrix": ev.J.tolist(), "offset": ev.h0.tolist()}
        subs.append(entry)
    return {"format": PNLP_FORMAT, "n_c": problem.n_c, "b": problem.b.tolist(),
            "subsystems": subs}


def dump_pnlp(problem, path):
    with open(path, "w") as fh:
        json.dump(pnlp_to_dict(problem), fh, indent=1)


def load_pnlp(source):
    """Load a partitioned QP from a pnlp-v1 document (path, JSON text or dict)."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text) as fh:
                text = fh.read()
        doc = json.loads(text)
    if doc.get("format") != PNLP_FORMAT:
        raise InstanceError(f"expected format {PNLP_FORMAT!r}, got {doc.get('format')!r}")
    b = np.asarray(doc["b"], dtype=float)
    n_c = int(doc.get("n_c", b.size))
    if n_c != b.size:
        raise InstanceError(f"n_c={n_c} but b has length {b.size}")
    subs = []
    for i, entry in enumerate(doc["subsystems"]):
        if "objective" not in entry:
            raise InstanceError(f"subsystem {i} has no quadratic objective")
        n = int(entry["n_x"])
        trip = entry["A"]
        A = sp.coo_matrix((trip["vals"], (trip["rows"], trip["cols"])), shape=(n_c, n))
        obj = entry["objective"]
        eq = entry.get("eq") or {}
        ineq = entry.get("ineq") or {}
        sub = Subsystem.quadratic(
            obj["H"], obj["c"], A,
            G=eq.get("matrix"), g0=eq.get("offset"),
            J=ineq.get("matrix"), h0=ineq.get("offset"),
            c0=obj.get("c0", 0.0), name=entry.get("name", f"s{i + 1}"),
        )
        for key in ("n_g", "n_h"):
            if key in entry and int(entry[key]) != getattr(sub, key):
                raise InstanceError(f"subsystem {i}: declared {key} does not match data")
        subs.append(sub)
    return PartitionedNlp(subs, b)


def stack_points(points: Sequence[SubsystemPoint]):
    return np.concatenate([p.stacked() for p in points])
