"""Outer loop of the essentially decentralized interior point method.

Per iteration every agent factorizes its KKT block and forms ``(S_i, s_i)``;
the coupling system is solved inexactly by decentralized CG with a forcing
tolerance tied to ``||F^delta||``; agents back-substitute; step sizes and
the next barrier parameter come from global min/max reductions.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import agent
from .coordination import MessageBus, comm_report, dcg_solve
from .errors import CurvatureError, EvaluationError, FactorizationError, InteriorViolationError
from .problem import SubsystemPoint, evaluate, local_residual_blocks

__all__ = [
    "SolverOptions",
    "IterationRecord",
    "SolveResult",
    "Status",
    "solve",
    "forcing_tolerance",
    "update_barrier",
    "apply_step",
    "convergence_metrics",
    "initialize_points",
    "write_records_csv",
    "summary_dict",
    "CSV_COLUMNS",
]

FORCING_FLOOR = 1e-14


class Status(str, enum.Enum):
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration_limit"
    DIVERGED = "diverged"


@dataclass
class SolverOptions:
    tol: float = 1e-6
    delta0: float = 0.1
    delta_min: float = 1e-12
    sigma: float = 0.1
    tau: float = 0.995
    kappa_eta: float = 0.5
    theta_eta: float = 1.0
    max_outer: int = 200
    max_inner: int | None = None  # defaults to 20 * n_c
    inner_tol: float | None = None  # fixed inner tolerance, disables forcing
    consensus_tol: float | None = 5e-6  # cap on the inner tolerance
    warm_start: bool = True
    # non-convex subsystems make sum S_i indefinite; keep iterating instead of failing
    indefinite_cg: bool = True
    threads: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not self.delta0 > self.delta_min > 0:
            raise ValueError("need delta0 > delta_min > 0")
        if self.kappa_eta <= 0 or self.theta_eta < 0:
            raise ValueError("forcing parameters must be positive")

    def inner_cap(self, n_c):
        return self.max_inner if self.max_inner is not None else 20 * n_c


@dataclass
class IterationRecord:
    """Diagnostics of outer iteration ``k``.

    Norms and errors describe the iterate after the step; ``inner``,
    ``delta``, ``alpha_p``, ``alpha_d`` and ``forcing_norm`` describe the
    step that produced it.
    """

    k: int
    kkt0: float
    kkt_delta: float
    consensus: float
    eq_inf: float
    ineq_inf: float
    objective: float
    objective_error: float | None
    x_error: float | None
    inner: int
    inner_tol: float
    cg_residual: float
    inexact: bool
    delta: float
    alpha_p: float
    alpha_d: float
    comm_floats: int
    regularization: float
    min_interior: float


CSV_COLUMNS = [f.name for f in fields(IterationRecord)]


@dataclass
class SolveResult:
    points: list[SubsystemPoint]
    lam: np.ndarray
    status: Status
    records: list[IterationRecord]
    delta: float
    comm: dict
    message: str = ""
    bus: MessageBus | None = field(default=None, repr=False)

    @property
    def iterations(self):
        return len(self.records)

    @property
    def x(self):
        return np.concatenate([p.x for p in self.points])

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def total_inner(self):
        return sum(r.inner for r in self.records)


def forcing_tolerance(norm, options):
    """Inner tolerance ``kappa * min(1, norm^theta) * norm``, floored at 1e-14."""
    if norm < 0:
        raise ValueError("residual norm must be nonnegative")
    tol = options.kappa_eta * min(1.0, norm ** options.theta_eta) * norm
    return max(tol, FORCING_FLOOR)


def update_barrier(delta, candidate, options):
    """Next barrier parameter: ``max(delta_min, min(0.9 delta, candidate))``."""
    return max(options.delta_min, min(0.9 * delta, candidate))


def apply_step(points, lam, steps, dlam, alpha_p, alpha_d):
    """Primal parts move by ``alpha_p``, multipliers (incl. lambda) by ``alpha_d``."""
    if not (0 < alpha_p <= 1 and 0 < alpha_d <= 1):
        raise ValueError("step sizes must lie in (0, 1]")
    new = []
    for i, (pt, dp) in enumerate(zip(points, steps)):
        q = SubsystemPoint(pt.x + alpha_p * dp.x, pt.v + alpha_p * dp.v,
                           pt.gamma + alpha_d * dp.gamma, pt.mu + alpha_d * dp.mu)
        if not q.is_interior():
            raise InteriorViolationError(f"subsystem {i}: step left the interior")
        new.append(q)
    return new, lam + alpha_d * dlam


def initialize_points(problem, xs, delta0):
    """Default start: ``v = max(1, 1 - h(x))``, ``mu = delta0 / v``, zero equality duals."""
    points = []
    for i, (sub, x) in enumerate(zip(problem.subsystems, xs)):
        _, _, h = evaluate(sub, x, i)
        v = np.maximum(1.0, 1.0 - h)
        points.append(SubsystemPoint(np.array(x, dtype=float), v, np.zeros(sub.n_g), delta0 / v))
    return points


def default_initial_x(problem):
    xs = []
    for sub in problem.subsystems:
        init = getattr(sub.evaluator, "initial_x", None)
        xs.append(np.asarray(init(), dtype=float) if init else np.zeros(sub.n_x))
    return xs


class _Residuals:
    """Residual pieces at one iterate, reusable for any barrier value."""

    def __init__(self, problem, points, lam, bus=None):
        self.points = points
        self.parts = []
        self.values = []
        for i, (sub, pt) in enumerate(zip(problem.subsystems, points)):
            stat, comp, g, hv = local_residual_blocks(sub, pt, lam, 0.0, i)
            self.parts.append((stat, -comp, g, hv))  # -comp = v * mu
            self.values.append(evaluate(sub, pt.x, i))
        xs = [pt.x for pt in points]
        if bus is not None:
            total = bus.global_sum([sub.A @ x for sub, x in zip(problem.subsystems, xs)],
                                   phase="reduction")
        else:
            total = problem.coupling_product(xs)
        self.coupling = problem.b - total
        self.coupling_norm = float(np.max(np.abs(self.coupling), initial=0.0))

    def local_norms(self, delta):
        out = []
        for stat, vmu, g, hv in self.parts:
            out.append(max(float(np.max(np.abs(stat), initial=0.0)),
                           float(np.max(np.abs(delta - vmu), initial=0.0)),
                           float(np.max(np.abs(g), initial=0.0)),
                           float(np.max(np.abs(hv), initial=0.0))))
        return out

    def norm(self, delta, bus=None):
        local = self.local_norms(delta)
        worst = bus.global_max(local) if bus is not None else max(local)
        return max(worst, self.coupling_norm)

    def newton_residual(self, i, delta):
        stat, vmu, g, hv = self.parts[i]
        return np.concatenate([stat, (delta - vmu) / self.points[i].v, g, hv])


def convergence_metrics(problem, points, lam, reference=None, residuals=None):
    """Quantities tracked per iteration (norms, feasibility, errors against a reference)."""
    res = residuals or _Residuals(problem, points, lam)
    eq = max([float(np.max(np.abs(v[1]), initial=0.0)) for v in res.values] + [0.0])
    ineq = max([float(np.max(np.maximum(v[2], 0.0), initial=0.0)) for v in res.values] + [0.0])
    obj = sum(v[0] for v in res.values)
    out = {"kkt0": res.norm(0.0), "consensus": res.coupling_norm, "eq_inf": eq,
           "ineq_inf": ineq, "objective": obj, "objective_error": None, "x_error": None}
    if reference is not None:
        x_ref, f_ref = reference
        x = np.concatenate([p.x for p in points])
        x_ref = np.concatenate(x_ref) if isinstance(x_ref, (list, tuple)) else np.asarray(x_ref)
        out["objective_error"] = abs(obj - f_ref) / abs(f_ref) if f_ref != 0 else abs(obj)
        out["x_error"] = float(np.max(np.abs(x - x_ref), initial=0.0))
    return out


class DecomposedStep:
    """Newton step via local Schur contributions and decentralized CG."""

    def __init__(self, problem, options, bus, pool=None):
        self.problem = problem
        self.options = options
        self.bus = bus
        self.pool = pool
        self.dlam = None
        self.kkts = []

    def _map(self, fn, items):
        if self.pool is None:
            return [fn(*it) for it in items]
        return list(self.pool.map(lambda it: fn(*it), items))

    def __call__(self, points, lam, delta, residuals, forcing_norm):
        problem, opts = self.problem, self.options
        n = problem.n_agents

        def local(i, sub, pt):
            kkt = agent.factorize(agent.assemble_local_kkt(sub, pt, i))
            F = residuals.newton_residual(i, delta)
            contrib = agent.schur_contribution(kkt, sub.A, F, sub.A @ pt.x, problem.b, n)
            return kkt, F, contrib

        out = self._map(local, [(i, s, p) for i, (s, p) in enumerate(zip(problem.subsystems, points))])
        self.kkts = [o[0] for o in out]
        if opts.inner_tol is not None:
            tol = opts.inner_tol
        else:
            tol = forcing_tolerance(forcing_norm, opts)
            if opts.consensus_tol is not None:
                tol = min(tol, opts.consensus_tol)
        warm = self.dlam if opts.warm_start else None
        dlam, cg = dcg_solve([o[2] for o in out], self.bus, tol, opts.inner_cap(problem.n_c), warm,
                             allow_indefinite=opts.indefinite_cg)
        self.dlam = dlam
        steps = self._map(
            lambda kkt, F, sub: SubsystemPoint.from_stacked(
                agent.back_substitute(kkt, F, sub.A, dlam), sub.n_x, sub.n_g, sub.n_h),
            [(o[0], o[1], s) for o, s in zip(out, problem.subsystems)],
        )
        info = {"inner": cg.iterations, "inner_tol": tol, "cg_residual": float(cg.history[-1]),
                "inexact": cg.inexact,
                "regularization": max(k.regularization_applied for k in self.kkts)}
        return steps, dlam, info


def run_interior_point(problem, options, stepper, bus, initial=None, reference=None):
    """Shared outer iteration; ``stepper`` decides how the Newton system is solved."""
    if initial is None:
        initial = initialize_points(problem, default_initial_x(problem), options.delta0)
    points = [p.copy() for p in initial]
    for i, p in enumerate(points):
        if not p.is_interior():
            raise InteriorViolationError(f"subsystem {i}: initial v and mu must be > 0")
    lam = np.zeros(problem.n_c)
    delta = options.delta0
    records = []
    status, message = Status.ITERATION_LIMIT, ""
    res = _Residuals(problem, points, lam, bus)
    if res.norm(0.0, bus) <= options.tol:
        status = Status.CONVERGED
    for k in range(1, options.max_outer + 1):
        if status is Status.CONVERGED:
            break
        floats_before = bus.floats
        forcing_norm = res.norm(delta, bus)
        try:
            steps, dlam, info = stepper(points, lam, delta, res, forcing_norm)
        except (FactorizationError, CurvatureError, EvaluationError) as exc:
            status, message = Status.DIVERGED, str(exc)
            break
        local_alpha = [agent.local_fraction_to_boundary(p, s, options.tau)
                       for p, s in zip(points, steps)]
        alpha_p = bus.global_min([a[0] for a in local_alpha])
        alpha_d = bus.global_min([a[1] for a in local_alpha])
        finite = all(np.all(np.isfinite(s.stacked())) for s in steps) and np.all(np.isfinite(dlam))
        if not finite or alpha_p <= 0 or alpha_d <= 0:
            status, message = Status.DIVERGED, "non-finite or zero step"
            break
        points, lam = apply_step(points, lam, steps, dlam, alpha_p, alpha_d)
        used_delta = delta
        candidate = bus.global_max([agent.local_barrier_candidate(p, options.sigma) for p in points])
        delta = update_barrier(delta, candidate, options)
        try:
            res = _Residuals(problem, points, lam, bus)
        except EvaluationError as exc:
            status, message = Status.DIVERGED, str(exc)
            break
        kkt0 = res.norm(0.0, bus)
        metrics = convergence_metrics(problem, points, lam, reference, res)
        metrics["kkt0"] = kkt0
        min_int = min(min(float(np.min(p.v, initial=np.inf)), float(np.min(p.mu, initial=np.inf)))
                      for p in points)
        records.append(IterationRecord(
            k=k, kkt_delta=forcing_norm, delta=used_delta, alpha_p=alpha_p, alpha_d=alpha_d,
            comm_floats=bus.floats - floats_before, min_interior=min_int, **metrics, **info,
        ))
        if not math.isfinite(kkt0):
            status, message = Status.DIVERGED, "non-finite residual"
            break
        if kkt0 <= options.tol:
            status = Status.CONVERGED
    return SolveResult(points, lam, status, records, delta, comm_report(bus), message, bus)


def solve(problem, options=None, initial=None, reference=None, keep_log=True):
    """Run the decentralized interior point method.

    ``initial`` is a list of interior :class:`SubsystemPoint` (defaults to
    the evaluators' ``initial_x`` with the standard slack/multiplier rule);
    ``reference`` is an optional ``(x_star, f_star)`` pair for error columns.
    """
    options = options or SolverOptions()
    bus = MessageBus(problem.n_agents, keep_log=keep_log)
    pool = ThreadPoolExecutor(options.threads) if options.threads > 1 else None
    try:
        stepper = DecomposedStep(problem, options, bus, pool)
        return run_interior_point(problem, options, stepper, bus, initial, reference)
    finally:
        if pool is not None:
            pool.shutdown()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_records_csv(records, path_or_file):
    """One row per outer iteration; empty cells where no reference was given."""
    own = isinstance(path_or_file, str) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            d = asdict(rec)
            w.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
    finally:
        if own:
            fh.close()


def summary_dict(result):
    last = result.records[-1] if result.records else None
    return {
        "status": result.status.value,
        "message": result.message,
        "iterations": result.iterations,
        "inner_iterations": result.total_inner,
        "kkt0": last.kkt0 if last else None,
        "consensus": last.consensus if last else None,
        "eq_inf": last.eq_inf if last else None,
        "ineq_inf": last.ineq_inf if last else None,
        "objective": last.objective if last else None,
        "objective_error": last.objective_error if last else None,
        "delta": result.delta,
        "comm": result.comm,
    }


def write_summary(result, path, extra=None):
    doc = summary_dict(result)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
