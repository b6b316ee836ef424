"""AC OPF in rectangular voltage coordinates, centralized and partitioned.

Per region the variables are ``x = (e, f, p, q)`` over its local buses
(owned buses first, then copies of foreign tie-line endpoints) and its
generators.  Equalities are the power balances of owned buses (real part
first) plus the slack reference where present; inequalities are generator
boxes and squared voltage-magnitude bounds on owned buses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ..driver import initialize_points
from ..errors import InstanceError
from ..problem import PartitionedNlp, Subsystem
from .case import (BR_B, BR_R, BR_STATUS, BR_X, BS, F_BUS, GEN_BUS, GS, PMAX, PMIN, QMAX,
                   QMIN, T_BUS, TAP)

__all__ = [
    "build_admittance",
    "OpfRegionEvaluator",
    "RegionPartition",
    "build_opf_nlp",
    "partition_opf",
    "flat_start",
    "power_injections",
]


def build_admittance(case):
    """Bus admittance matrix (sparse, complex) including line charging and bus shunts."""
    n = case.n_bus
    br = case.branch[case.branch[:, BR_STATUS] > 0] if case.n_branch else case.branch
    z = br[:, BR_R] + 1j * br[:, BR_X]
    if np.any(z == 0):
        raise InstanceError("zero-impedance branch")
    y = 1.0 / z
    ysh = 0.5j * br[:, BR_B]
    tap = br[:, TAP].copy()
    tap[tap == 0] = 1.0
    f = case.bus_indices(br[:, F_BUS]) if len(br) else np.zeros(0, int)
    t = case.bus_indices(br[:, T_BUS]) if len(br) else np.zeros(0, int)
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    vals = np.concatenate([(y + ysh) / tap ** 2, y + ysh, -y / tap, -y / tap])
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    shunt = (case.bus[:, GS] + 1j * case.bus[:, BS]) / case.base_mva
    return (Y + sp.diags(shunt)).tocsr()


def power_injections(Y, v):
    """Complex injections ``diag(v) conj(Y v)``."""
    return v * np.conj(Y @ v)


def _components(n, f, t):
    if n == 0:
        return 0, np.zeros(0, int)
    adj = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    return connected_components(adj, directed=False)


class OpfRegionEvaluator:
    """Values and exact derivatives of one (possibly the only) OPF region."""

    def __init__(self, case, owned, copies=(), reference=None, Y=None):
        Y = build_admittance(case) if Y is None else Y
        self.case = case
        self.owned = np.asarray(owned, dtype=int)
        self.copies = np.asarray(copies, dtype=int)
        self.local = np.concatenate([self.owned, self.copies])
        self.n_own, self.n_loc = self.owned.size, self.local.size
        rows = Y[self.owned]
        pos = np.full(case.n_bus, -1)
        pos[self.local] = np.arange(self.n_loc)
        coo = rows.tocoo()
        if np.any(pos[coo.col] < 0):
            raise InstanceError("owned bus is connected to a bus that is neither owned nor copied")
        Yr = sp.csr_matrix((coo.data, (coo.row, pos[coo.col])), shape=(self.n_own, self.n_loc))
        self.G = sp.csr_matrix(Yr.real)
        self.B = sp.csr_matrix(Yr.imag)
        owned_pos = np.full(case.n_bus, -1)
        owned_pos[self.owned] = np.arange(self.n_own)
        gens = case.in_service_gens
        gen_bus = case.bus_indices(case.gen[gens, GEN_BUS]) if gens.size else np.zeros(0, int)
        mine = owned_pos[gen_bus] >= 0
        self.gens = gens[mine]
        self.n_gen = self.gens.size
        self.Cg = sp.csr_matrix((np.ones(self.n_gen), (owned_pos[gen_bus[mine]], np.arange(self.n_gen))),
                                shape=(self.n_own, self.n_gen))
        base = case.base_mva
        self.base = base
        gen = case.gen[self.gens]
        self.pmin, self.pmax = gen[:, PMIN] / base, gen[:, PMAX] / base
        self.qmin, self.qmax = gen[:, QMIN] / base, gen[:, QMAX] / base
        self.c2, self.c1, self.c0 = case.gencost[self.gens].T
        self.pd, self.qd = case.pd[self.owned], case.qd[self.owned]
        self.vmin2, self.vmax2 = case.vmin[self.owned] ** 2, case.vmax[self.owned] ** 2
        self.reference = None
        if reference is not None:
            bus, vs = reference
            if owned_pos[bus] < 0:
                raise InstanceError("reference bus must be owned by the region")
            self.reference = (int(owned_pos[bus]), complex(vs))
        self.n_x = 2 * self.n_loc + 2 * self.n_gen
        self.n_g = 2 * self.n_own + (2 if self.reference else 0)
        self.n_h = 4 * self.n_gen + 2 * self.n_own
        self._sel = sp.eye(self.n_own, self.n_loc, format="csr")

    # -- layout helpers
    def split(self, x):
        nl, ng = self.n_loc, self.n_gen
        return x[:nl], x[nl:2 * nl], x[2 * nl:2 * nl + ng], x[2 * nl + ng:]

    def e_index(self, local_pos):
        return local_pos

    def f_index(self, local_pos):
        return self.n_loc + local_pos

    def initial_x(self):
        """Flat start: unit voltages, generator outputs at the middle of their ranges."""
        return np.concatenate([np.ones(self.n_loc), np.zeros(self.n_loc),
                               0.5 * (self.pmin + self.pmax), 0.5 * (self.qmin + self.qmax)])

    def _currents(self, e, f):
        Ir = self.G @ e - self.B @ f
        Ii = self.B @ e + self.G @ f
        return Ir, Ii

    def values(self, x):
        e, f, p, q = self.split(x)
        Ir, Ii = self._currents(e, f)
        eo, fo = e[:self.n_own], f[:self.n_own]
        P = eo * Ir + fo * Ii
        Q = fo * Ir - eo * Ii
        g = [P - self.Cg @ p + self.pd, Q - self.Cg @ q + self.qd]
        if self.reference:
            r, vs = self.reference
            g.append([e[r] - vs.real, f[r] - vs.imag])
        vm2 = eo ** 2 + fo ** 2
        h = np.concatenate([self.pmin - p, p - self.pmax, self.qmin - q, q - self.qmax,
                            self.vmin2 - vm2, vm2 - self.vmax2])
        pm = self.base * p
        obj = float(np.sum(self.c2 * pm ** 2 + self.c1 * pm + self.c0))
        return obj, np.concatenate(g), h

    def _jacobians(self, e, f):
        no, nl, ng = self.n_own, self.n_loc, self.n_gen
        Ir, Ii = self._currents(e, f)
        eo, fo = sp.diags(e[:no]), sp.diags(f[:no])
        S = self._sel
        dPde = sp.diags(Ir) @ S + eo @ self.G + fo @ self.B
        dPdf = sp.diags(Ii) @ S - eo @ self.B + fo @ self.G
        dQde = -sp.diags(Ii) @ S + fo @ self.G - eo @ self.B
        dQdf = sp.diags(Ir) @ S - fo @ self.B - eo @ self.G
        negC = -self.Cg
        zero = sp.csr_matrix((no, ng))
        blocks = [[dPde, dPdf, negC, zero], [dQde, dQdf, zero, negC]]
        if self.reference:
            r, _ = self.reference
            ref = sp.csr_matrix(([1.0, 1.0], ([0, 1], [r, nl + r])), shape=(2, self.n_x))
            jg = sp.vstack([sp.bmat(blocks), ref])
        else:
            jg = sp.bmat(blocks)
        Ig = sp.eye(ng)
        zg, zv = sp.csr_matrix((ng, nl)), sp.csr_matrix((no, ng))
        dv_e, dv_f = 2 * eo @ S, 2 * fo @ S
        jh = sp.bmat([
            [zg, zg, -Ig, None],
            [zg, zg, Ig, None],
            [zg, zg, None, -Ig],
            [zg, zg, None, Ig],
            [-dv_e, -dv_f, zv, zv],
            [dv_e, dv_f, zv, zv],
        ])
        return jg.toarray(), jh.toarray()

    def gradients(self, x):
        e, f, p, _ = self.split(x)
        df = np.zeros(self.n_x)
        off = 2 * self.n_loc
        df[off:off + self.n_gen] = self.base * (2 * self.c2 * self.base * p + self.c1)
        jg, jh = self._jacobians(e, f)
        return df, jg, jh

    def derivatives(self, x, gamma, mu):
        e, f, _, _ = self.split(x)
        no, nl, ng = self.n_own, self.n_loc, self.n_gen
        df, jg, jh = self.gradients(x)
        lp, lq = gamma[:no], gamma[no:2 * no]
        St = self._sel.T
        Gp = (St @ sp.diags(lp) @ self.G).toarray()
        Bp = (St @ sp.diags(lp) @ self.B).toarray()
        Gq = (St @ sp.diags(lq) @ self.G).toarray()
        Bq = (St @ sp.diags(lq) @ self.B).toarray()
        Hee = Gp + Gp.T - Bq - Bq.T
        Hef = Bp.T - Bp + Gq.T - Gq
        mu_lo, mu_hi = mu[4 * ng:4 * ng + no], mu[4 * ng + no:]
        dv = 2.0 * (mu_hi - mu_lo)
        idx = np.arange(no)
        H = np.zeros((self.n_x, self.n_x))
        H[:nl, :nl] = Hee
        H[nl:2 * nl, nl:2 * nl] = Hee
        H[:nl, nl:2 * nl] = Hef
        H[nl:2 * nl, :nl] = Hef.T
        H[idx, idx] += dv
        H[nl + idx, nl + idx] += dv
        gi = 2 * nl + np.arange(ng)
        H[gi, gi] = 2 * self.c2 * self.base ** 2
        return df, jg, jh, H


def _check_connected(case, buses, what):
    buses = np.asarray(buses, dtype=int)
    pos = np.full(case.n_bus, -1)
    pos[buses] = np.arange(buses.size)
    br = case.branch[case.in_service_branches]
    f, t = pos[case.bus_indices(br[:, F_BUS])], pos[case.bus_indices(br[:, T_BUS])]
    keep = (f >= 0) & (t >= 0)
    n, labels = _components(buses.size, f[keep], t[keep])
    if n > 1:
        raise InstanceError(f"{what} is not connected ({n} islands)")


def build_opf_nlp(case, name="opf"):
    """The centralized AC OPF as a single subsystem (no coupling rows)."""
    s = case.slack_buses
    if s.size != 1:
        raise InstanceError(f"expected exactly one slack bus, found {s.size}")
    _check_connected(case, np.arange(case.n_bus), "network (some bus has no path to the slack)")
    ev = OpfRegionEvaluator(case, np.arange(case.n_bus), reference=(s[0], case.slack_voltage()))
    return Subsystem(ev.n_x, ev.n_g, ev.n_h, ev, sp.csr_matrix((0, ev.n_x)), name)


@dataclass
class RegionPartition:
    """Bus-to-region map, tie lines, and the duplicated boundary voltages."""

    region_of: np.ndarray          # per bus index, 0-based region
    owned: list                    # bus indices owned by each region
    copies: list                   # foreign bus indices copied into each region
    tie_lines: np.ndarray          # branch indices crossing regions
    shared: list                   # (bus index, owner region, copying region) per consensus pair
    gens: list                     # generator indices per region

    @property
    def n_regions(self):
        return len(self.owned)

    def to_centralized(self, xs, case):
        """Drop the copies; returns ``x`` in :func:`build_opf_nlp` layout."""
        n, gens = case.n_bus, case.in_service_gens
        e, f = np.zeros(n), np.zeros(n)
        p, q = np.zeros(case.n_gen), np.zeros(case.n_gen)
        for r, x in enumerate(xs):
            nl, no, ng = len(self.owned[r]) + len(self.copies[r]), len(self.owned[r]), len(self.gens[r])
            e[self.owned[r]] = x[:no]
            f[self.owned[r]] = x[nl:nl + no]
            p[self.gens[r]] = x[2 * nl:2 * nl + ng]
            q[self.gens[r]] = x[2 * nl + ng:]
        return np.concatenate([e, f, p[gens], q[gens]])

    def from_centralized(self, x, case):
        n, gens = case.n_bus, case.in_service_gens
        e, f = x[:n], x[n:2 * n]
        p, q = np.zeros(case.n_gen), np.zeros(case.n_gen)
        p[gens], q[gens] = x[2 * n:2 * n + gens.size], x[2 * n + gens.size:]
        out = []
        for r in range(self.n_regions):
            loc = np.concatenate([self.owned[r], self.copies[r]]).astype(int)
            out.append(np.concatenate([e[loc], f[loc], p[self.gens[r]], q[self.gens[r]]]))
        return out


def _region_array(case, assignment):
    if isinstance(assignment, dict):
        region = np.array([assignment.get(int(b), 0) for b in case.bus_ids])
    else:
        assignment = list(assignment)
        if assignment and isinstance(assignment[0], (list, tuple, np.ndarray)):
            region = np.zeros(case.n_bus, dtype=int)
            for r, ids in enumerate(assignment, start=1):
                region[case.bus_indices(ids)] = r
        else:
            region = np.asarray(assignment, dtype=int)
    if region.size != case.n_bus or np.any(region < 1):
        raise InstanceError("every bus must be assigned to a region numbered from 1")
    labels = np.unique(region)
    if not np.array_equal(labels, np.arange(1, labels.size + 1)):
        raise InstanceError("region numbers must be contiguous starting at 1")
    return region - 1


def partition_opf(case, assignment):
    """Split the OPF into regions coupled by consensus on duplicated tie-line voltages.

    ``assignment`` maps bus number to region (dict), lists bus numbers per
    region, or gives a region per bus in case order.  Regions are numbered
    from 1 and region 1 must own the slack bus.
    """
    region = _region_array(case, assignment)
    R = int(region.max()) + 1
    s = case.slack_buses
    if s.size != 1:
        raise InstanceError(f"expected exactly one slack bus, found {s.size}")
    if region[s[0]] != 0:
        raise InstanceError("region 1 must contain the slack bus")
    Y = build_admittance(case)
    br_idx = case.in_service_branches
    fb = case.bus_indices(case.branch[br_idx, F_BUS])
    tb = case.bus_indices(case.branch[br_idx, T_BUS])
    cross = region[fb] != region[tb]
    ties = br_idx[cross]
    owned = [np.flatnonzero(region == r) for r in range(R)]
    for r in range(R):
        _check_connected(case, owned[r], f"region {r + 1}")
    copies = [[] for _ in range(R)]
    shared = []
    for a, b in zip(fb[cross], tb[cross]):
        for bus, other in ((a, b), (b, a)):
            copier = region[other]
            if bus not in copies[copier]:
                copies[copier].append(bus)
                shared.append((int(bus), int(region[bus]), int(copier)))
    if R > 1:
        for r in range(R):
            if not any(r in (region[a], region[b]) for a, b in zip(fb[cross], tb[cross])):
                raise InstanceError(f"region {r + 1} has no tie line")
    evaluators = []
    for r in range(R):
        ref = (s[0], case.slack_voltage()) if r == 0 else None
        evaluators.append(OpfRegionEvaluator(case, owned[r], np.array(copies[r], dtype=int), ref, Y))
    n_c = 2 * len(shared)
    trip = [([], [], []) for _ in range(R)]

    def local_pos(r, bus):
        return int(np.flatnonzero(evaluators[r].local == bus)[0])

    for k, (bus, owner, copier) in enumerate(shared):
        for r, sign in ((owner, 1.0), (copier, -1.0)):
            ev = evaluators[r]
            pos = local_pos(r, bus)
            for row, col in ((2 * k, ev.e_index(pos)), (2 * k + 1, ev.f_index(pos))):
                trip[r][0].append(row)
                trip[r][1].append(col)
                trip[r][2].append(sign)
    subs = []
    for r, ev in enumerate(evaluators):
        rows, cols, vals = trip[r]
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n_c, ev.n_x))
        subs.append(Subsystem(ev.n_x, ev.n_g, ev.n_h, ev, A, name=f"region{r + 1}"))
    part = RegionPartition(region, owned, [np.array(c, dtype=int) for c in copies], ties,
                           shared, [ev.gens for ev in evaluators])
    if R == 1:
        return PartitionedNlp(subs, np.zeros(0), part, allow_uncoupled=True)
    return PartitionedNlp(subs, np.zeros(n_c), part)


def flat_start(problem, delta0=0.1):
    """Flat voltages everywhere (copies included) with the default slack/multiplier rule."""
    xs = [sub.evaluator.initial_x() for sub in problem.subsystems]
    return initialize_points(problem, xs, delta0)
