"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Criterion 7 (six interconnected case118 copies) takes about 20 s; set
DIPOPT_SKIP_STRETCH=1 to skip it.
"""
import io
import os
import time

import numpy as np
import pytest

from dipopt.coordination import MessageBus, dcg_solve
from dipopt.agent import SchurContribution
from dipopt.driver import DecomposedStep, SolverOptions, _Residuals, solve, write_records_csv
from dipopt.opf import builtin_case, builtin_ties, flat_start, interconnect_copies, partition_opf
from dipopt.oracle import assemble_full_kkt, direct_newton_step, solve_centralized_barrier_newton

from conftest import bounded_qp, random_convex_qp, random_interior_points

_RUNS = {}      # every driver run from criteria 2-6, for the interior invariants


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def _csv(result):
    buf = io.StringIO()
    write_records_csv(result.records, buf)
    return buf.getvalue()


def _opf(k):
    case, assign = interconnect_copies(builtin_case("case118"), k, builtin_ties(k))
    return partition_opf(case, assign)


@pytest.fixture(scope="module")
def two_regions():
    problem = _opf(2)
    init = flat_start(problem)
    ref = solve_centralized_barrier_newton(problem, initial=init)
    t = time.perf_counter()
    forcing = solve(problem, SolverOptions(), init, ref.reference)
    elapsed = time.perf_counter() - t
    fixed = solve(problem, SolverOptions(inner_tol=1e-12), init, ref.reference)
    rerun = solve(problem, SolverOptions(), init, ref.reference)
    _RUNS.update(opf_forcing=forcing, opf_fixed=fixed)
    return dict(ref=ref, forcing=forcing, fixed=fixed, rerun=rerun, elapsed=elapsed)


def test_criterion_1_schur_path_matches_direct_step(capsys):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        p = random_convex_qp(rng)
        pts = random_interior_points(rng, p)
        lam = rng.standard_normal(p.n_c)
        delta = float(rng.uniform(1e-3, 1.0))
        bus = MessageBus(p.n_agents)
        res = _Residuals(p, pts, lam, bus)
        stepper = DecomposedStep(p, SolverOptions(inner_tol=1e-15, max_inner=200), bus)
        steps, dlam, _ = stepper(pts, lam, delta, res, res.norm(delta))
        ref_steps, ref_dlam, _ = direct_newton_step(assemble_full_kkt(p, pts, lam, delta))
        a = np.concatenate([s.stacked() for s in steps] + [dlam])
        b = np.concatenate([s.stacked() for s in ref_steps] + [ref_dlam])
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    report(capsys, 1, worst <= 1e-10, f"max relative step error {worst:.2e} over 50 QPs")


def test_criterion_2_hand_solvable_qp(capsys):
    r = solve(bounded_qp(), SolverOptions(tol=1e-8))
    _RUNS["qp"] = r
    f = r.records[-1].objective
    ok = (r.converged and r.iterations <= 30 and r.records[-1].kkt0 <= 1e-8
          and np.allclose(r.x, [0.8, 1.2], atol=1e-7) and abs(f - 1.04) <= 1e-7)
    report(capsys, 2, ok, f"x={r.x.round(9).tolist()} f={f:.10f} "
           f"||F0||={r.records[-1].kkt0:.1e} in {r.iterations} iterations")


def test_criterion_3_cg_finite_termination(capsys):
    worst, bad = 0.0, []
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(1, 33))
        M = rng.standard_normal((n, n))
        S = M @ M.T / n + np.eye(n)
        s = rng.standard_normal(n)
        _, st = dcg_solve([SchurContribution(S, s)], MessageBus(1), 1e-12, n)
        worst = max(worst, st.history[-1])
        if st.history[-1] > 1e-12 or st.iterations > n:
            bad.append(seed)
    report(capsys, 3, not bad, f"worst final residual {worst:.1e}, failures {bad}")


def test_criterion_4_two_region_opf(two_regions, capsys):
    r, ref = two_regions["forcing"], two_regions["ref"]
    rel = abs(r.records[-1].objective - ref.f) / abs(ref.f)
    cons = max(rec.consensus for rec in r.records[1:])
    ok = (r.converged and r.records[-1].kkt0 <= 1e-6 and r.iterations <= 100
          and rel <= 1e-4 and cons <= 1e-5 and two_regions["elapsed"] <= 60)
    report(capsys, 4, ok, f"{r.status.value} in {r.iterations} iterations, "
           f"||F0||={r.records[-1].kkt0:.1e}, relative objective gap {rel:.1e}, "
           f"max consensus after first iteration {cons:.1e}, {two_regions['elapsed']:.1f} s")


def test_criterion_5_inexactness_economy(two_regions, capsys):
    r, fixed = two_regions["forcing"], two_regions["fixed"]
    ratio = r.total_inner / fixed.total_inner
    counts = [rec.inner for rec in r.records]
    early, late = np.mean(counts[5:8]), np.mean(counts[-3:])
    ok = ratio <= 0.5 and late >= early
    report(capsys, 5, ok, f"inner iterations {r.total_inner} vs {fixed.total_inner} "
           f"fixed (ratio {ratio:.2f}); mean of iterations 6-8 {early:.1f}, last three {late:.1f}")


def test_criterion_6_fast_local_convergence(two_regions, capsys):
    kkt = [rec.kkt0 for rec in two_regions["forcing"].records]
    factors = [a / b for a, b in zip(kkt[-4:-1], kkt[-3:])]
    ok = all(f >= 5 for f in factors)
    report(capsys, 6, ok, "reduction factors " + ", ".join(f"{f:.1f}" for f in factors))


@pytest.mark.skipif(os.environ.get("DIPOPT_SKIP_STRETCH") == "1", reason="stretch run skipped")
def test_criterion_7_six_regions(capsys):
    problem = _opf(6)
    init = flat_start(problem)
    ref = solve_centralized_barrier_newton(problem, initial=init)
    r = solve(problem, SolverOptions(), init, ref.reference)
    rel = abs(r.records[-1].objective - ref.f) / abs(ref.f)
    ok = r.converged and r.iterations <= 70 and r.total_inner <= 3 * 497
    report(capsys, 7, ok, f"{problem.n_x} variables, {r.status.value} in {r.iterations} outer / "
           f"{r.total_inner} inner iterations, relative objective gap {rel:.1e}")


def test_criterion_8_interior_invariants(two_regions, capsys):
    problems = []
    for name, r in sorted(_RUNS.items()):
        deltas = [rec.delta for rec in r.records]
        floor = SolverOptions().delta_min
        interior = all(rec.min_interior > 0 for rec in r.records)
        decreasing = all(b < a or a == b == floor for a, b in zip(deltas, deltas[1:]))
        if not (interior and decreasing and min(deltas) >= floor):
            problems.append(name)
    # criterion 1 evaluates single steps at random interior points
    report(capsys, 8, not problems and len(_RUNS) >= 3,
           f"checked {sorted(_RUNS)}; violations {problems}")


def test_criterion_9_determinism(two_regions, capsys):
    a, b = _csv(two_regions["forcing"]), _csv(two_regions["rerun"])
    report(capsys, 9, a == b, f"{len(a)} CSV bytes, identical={a == b}")
