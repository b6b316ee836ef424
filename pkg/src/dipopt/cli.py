"""Command-line entry point.

    dipopt solve-opf --case case118 --copies 2 --ties default --out run.csv --reference
    dipopt solve-pnlp --problem qp.json --out run.csv
    dipopt oracle --case case118 --copies 2 --ties default --summary ref.json
    dipopt check-derivatives --case case118
    dipopt make-interconnected --case case118 --copies 6 --ties default --out case118x6.m

Exit status: 0 on success, 1 on solver or input failure, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .driver import SolverOptions, solve, summary_dict, write_records_csv, write_summary
from .errors import CaseParseError, InstanceError
from .oracle import solve_centralized_barrier_newton
from .problem import check_derivatives_fd, load_pnlp
from .opf import (build_opf_nlp, builtin_case, builtin_ties, flat_start, format_matpower_case,
                  interconnect_copies, load_case, load_ties, partition_opf)


class UsageError(Exception):
    pass


def _add_instance_flags(p, opf=True, pnlp=False):
    if opf:
        p.add_argument("--case", help="MATPOWER case file or bundled name (case14, case118)")
        p.add_argument("--partition", help="JSON region assignment (lists of bus numbers)")
        p.add_argument("--copies", type=int, help="interconnect K renumbered copies of the case")
        p.add_argument("--ties", help="tie spec JSON, or 'default' for the bundled spec")
    if pnlp:
        p.add_argument("--problem", help="pnlp-v1 JSON instance")


def _add_solver_flags(p):
    p.add_argument("--tol", type=float, help="outer tolerance on ||F^0||_inf")
    p.add_argument("--delta0", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--kappa-eta", type=float)
    p.add_argument("--theta-eta", type=float)
    p.add_argument("--inner-tol", type=float, help="fixed inner tolerance (disables forcing)")
    p.add_argument("--threads", type=int, default=1)


def _add_output_flags(p, transcript=True):
    p.add_argument("--out", help="per-iteration CSV")
    p.add_argument("--summary", help="JSON summary")
    if transcript:
        p.add_argument("--transcript", help="line-delimited JSON message log")


def build_parser():
    parser = argparse.ArgumentParser(prog="dipopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-opf", help="decentralized solve of a partitioned AC OPF")
    _add_instance_flags(p)
    _add_solver_flags(p)
    _add_output_flags(p)
    p.add_argument("--reference", action="store_true",
                   help="run the centralized oracle first and fill error columns")

    p = sub.add_parser("solve-pnlp", help="decentralized solve of a pnlp-v1 instance")
    _add_instance_flags(p, opf=False, pnlp=True)
    _add_solver_flags(p)
    _add_output_flags(p)
    p.add_argument("--reference", action="store_true")

    p = sub.add_parser("oracle", help="centralized reference solve")
    _add_instance_flags(p, pnlp=True)
    _add_solver_flags(p)
    _add_output_flags(p, transcript=False)

    p = sub.add_parser("check-derivatives", help="finite-difference check of OPF derivatives")
    _add_instance_flags(p)
    p.add_argument("--points", type=int, default=5, help="random points per subsystem")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fd-tol", type=float, default=1e-6)

    p = sub.add_parser("make-interconnected", help="write K interconnected copies of a case")
    p.add_argument("--case", required=True)
    p.add_argument("--copies", type=int, required=True)
    p.add_argument("--ties", required=True)
    p.add_argument("--out", required=True, help="MATPOWER output file")
    p.add_argument("--assignment", help="JSON bus -> region map")
    return parser


def _case(name):
    if name is None:
        raise UsageError("--case is required")
    if os.path.exists(name):
        return load_case(name)
    return builtin_case(name)


def _ties(spec, k):
    if spec == "default":
        return builtin_ties(k)
    return load_ties(spec)


def _read_assignment(path):
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "regions" in doc:
        return doc["regions"]
    if isinstance(doc, dict):
        return {int(k): int(v) for k, v in doc.items()}
    return doc


def opf_instance(args):
    """Case and partitioned problem described by the instance flags."""
    if args.copies is not None and args.ties is None:
        raise UsageError("--copies requires --ties")
    if args.ties is not None and args.copies is None:
        raise UsageError("--ties requires --copies")
    if args.copies is not None and args.partition is not None:
        raise UsageError("--partition conflicts with --copies")
    case = _case(args.case)
    if args.copies is not None:
        case, assignment = interconnect_copies(case, args.copies, _ties(args.ties, args.copies))
    elif args.partition is not None:
        assignment = _read_assignment(args.partition)
    else:
        assignment = [1] * case.n_bus
    return case, partition_opf(case, assignment)


def solver_options(args, **defaults):
    names = ("tol", "delta0", "sigma", "tau", "max_outer", "kappa_eta", "theta_eta",
             "inner_tol", "threads")
    kw = dict(defaults)
    kw.update({n: getattr(args, n) for n in names if getattr(args, n, None) is not None})
    return SolverOptions(**kw)


def _problem(args):
    if getattr(args, "problem", None) is not None:
        if getattr(args, "case", None) is not None:
            raise UsageError("--problem conflicts with --case")
        problem = load_pnlp(args.problem)
        return problem, None
    problem = opf_instance(args)[1]
    return problem, flat_start(problem, (args.delta0 or SolverOptions.delta0))


def _report(result, args, extra=None):
    if args.out:
        write_records_csv(result.records, args.out)
    if args.summary:
        write_summary(result, args.summary, extra)
    doc = summary_dict(result)
    print(f"{doc['status']}: {doc['iterations']} outer / {doc['inner_iterations']} inner "
          f"iterations, objective {doc['objective']!r}, ||F0|| {doc['kkt0']!r}")
    if result.message:
        print(result.message, file=sys.stderr)
    return 0 if result.converged else 1


def cmd_solve(args):
    if args.command == "solve-pnlp" and args.problem is None:
        raise UsageError("--problem is required")
    problem, initial = _problem(args)
    options = solver_options(args)
    reference = None
    if args.reference:
        ref = solve_centralized_barrier_newton(problem, SolverOptions(tol=1e-8), initial)
        if not ref.converged:
            print(f"oracle did not converge: {ref.status.value}", file=sys.stderr)
            return 1
        reference = ref.reference
    result = solve(problem, options, initial, reference, keep_log=args.transcript is not None)
    if args.transcript:
        result.bus.write_transcript(args.transcript)
    extra = {"reference_objective": reference[1]} if reference else None
    return _report(result, args, extra)


def cmd_oracle(args):
    problem, initial = _problem(args)
    ref = solve_centralized_barrier_newton(problem, solver_options(args, tol=1e-8), initial)
    extra = {"x": ref.x.tolist(), "f": ref.f}
    return _report(ref.result, args, extra)


def cmd_check(args):
    problem = opf_instance(args)[1]
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i, sub in enumerate(problem.subsystems):
        x0 = sub.evaluator.initial_x()
        for _ in range(args.points):
            x = x0 + 0.05 * rng.standard_normal(sub.n_x)
            rep = check_derivatives_fd(sub, x, rng.standard_normal(sub.n_g),
                                       rng.random(sub.n_h), args.fd_tol)
            dev = max(rep.deviations.values())
            worst = max(worst, dev)
            if not rep.passed:
                print(f"{sub.name}: FAIL {rep.deviations}")
                return 1
    print(f"pass: {problem.n_agents} subsystem(s), {args.points} point(s) each, "
          f"max relative deviation {worst:.2e}")
    return 0


def cmd_interconnect(args):
    case, assignment = interconnect_copies(_case(args.case), args.copies,
                                           _ties(args.ties, args.copies))
    with open(args.out, "w") as fh:
        fh.write(format_matpower_case(case, f"interconnected_{args.copies}"))
    if args.assignment:
        with open(args.assignment, "w") as fh:
            json.dump({str(k): v for k, v in assignment.items()}, fh, indent=1)
    print(f"{case.n_bus} buses, {case.n_branch} branches, {case.n_gen} generators")
    return 0


COMMANDS = {
    "solve-opf": cmd_solve,
    "solve-pnlp": cmd_solve,
    "oracle": cmd_oracle,
    "check-derivatives": cmd_check,
    "make-interconnected": cmd_interconnect,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (CaseParseError, InstanceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
