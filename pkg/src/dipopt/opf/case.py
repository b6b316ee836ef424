"""Grid data: a MATPOWER case-file subset, writer, and multi-copy interconnection."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from ..errors import CaseParseError, InstanceError

__all__ = [
    "OpfCase",
    "TieLine",
    "parse_matpower_case",
    "load_case",
    "builtin_case",
    "format_matpower_case",
    "interconnect_copies",
    "load_ties",
    "builtin_ties",
    "SLACK",
    "PV",
    "PQ",
]

PQ, PV, SLACK = 1, 2, 3

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VA, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 8, 11, 12
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
GEN_BUS, PG, QG, QMAX, QMIN, VG, GEN_STATUS, PMAX, PMIN = 0, 1, 2, 3, 4, 5, 7, 8, 9
MODEL, NCOST, COST = 0, 3, 4


def _table(a, width):
    a = np.asarray(a, dtype=float)
    return a.reshape(0, width) if a.size == 0 else np.atleast_2d(a)


@dataclass
class OpfCase:
    """Per-unit grid data.  Costs stay in $/h with powers in MW."""

    base_mva: float
    bus: np.ndarray       # raw MATPOWER bus matrix
    branch: np.ndarray
    gen: np.ndarray
    gencost: np.ndarray   # (n_gen, 3) quadratic coefficients c2, c1, c0

    def __post_init__(self):
        self.bus = _table(self.bus, 13)
        self.branch = _table(self.branch, 13)
        self.gen = _table(self.gen, 10)
        self.gencost = _table(self.gencost, 3)
        self._index = {int(b): i for i, b in enumerate(self.bus[:, BUS_I])}
        if len(self._index) != self.n_bus:
            raise InstanceError("duplicate bus numbers")
        if self.gencost.shape[0] != self.gen.shape[0]:
            raise InstanceError("gencost must have one row per generator")

    @property
    def n_bus(self):
        return self.bus.shape[0]

    @property
    def n_branch(self):
        return self.branch.shape[0]

    @property
    def n_gen(self):
        return self.gen.shape[0]

    @property
    def bus_ids(self):
        return self.bus[:, BUS_I].astype(int)

    def bus_index(self, bus_id):
        try:
            return self._index[int(bus_id)]
        except KeyError:
            raise InstanceError(f"unknown bus {bus_id}") from None

    def bus_indices(self, ids):
        return np.array([self.bus_index(b) for b in ids], dtype=int)

    @property
    def slack_buses(self):
        return np.flatnonzero(self.bus[:, BUS_TYPE] == SLACK)

    # per-unit views
    @property
    def pd(self):
        return self.bus[:, PD] / self.base_mva

    @property
    def qd(self):
        return self.bus[:, QD] / self.base_mva

    @property
    def vmin(self):
        return self.bus[:, VMIN]

    @property
    def vmax(self):
        return self.bus[:, VMAX]

    @property
    def in_service_branches(self):
        return np.flatnonzero(self.branch[:, BR_STATUS] > 0)

    @property
    def in_service_gens(self):
        return np.flatnonzero(self.gen[:, GEN_STATUS] > 0)

    def slack_voltage(self):
        """Reference voltage ``v^s``: the slack generator's set point at angle zero."""
        s = self.slack_buses
        if s.size != 1:
            raise InstanceError(f"expected exactly one slack bus, found {s.size}")
        s = s[0]
        gens = [g for g in self.in_service_gens if self.bus_index(self.gen[g, GEN_BUS]) == s]
        vm = self.gen[gens[0], VG] if gens else self.bus[s, VM]
        return complex(vm, 0.0)

    def validate(self):
        if self.slack_buses.size == 0:
            raise InstanceError("case has no slack bus")
        br = self.branch[self.in_service_branches]
        if np.any((br[:, BR_R] == 0) & (br[:, BR_X] == 0)):
            raise InstanceError("zero-impedance branch")
        if np.any(self.vmin > self.vmax):
            raise InstanceError("voltage bounds out of order")
        g = self.gen[self.in_service_gens]
        if np.any(g[:, PMIN] > g[:, PMAX]) or np.any(g[:, QMIN] > g[:, QMAX]):
            raise InstanceError("generator bounds out of order")
        return self


_ASSIGN = re.compile(r"^\s*(?:\w+\.)?(\w+)\s*=\s*(.*)$")


def _strip_comment(line):
    i = line.find("%")
    return line if i < 0 else line[:i]


def _parse_row(text, lineno):
    try:
        return [float(tok) for tok in text.replace(",", " ").split()]
    except ValueError as exc:
        raise CaseParseError(f"non-numeric matrix entry ({exc})", lineno) from None


def _read_tables(text):
    """Collect scalar and matrix assignments with the line where each starts."""
    scalars, tables = {}, {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        line = _strip_comment(lines[i]).strip()
        i += 1
        m = _ASSIGN.match(line)
        if not m:
            continue
        name, rest = m.group(1), m.group(2).strip()
        if not rest.startswith("["):
            value = rest.rstrip(";").strip()
            scalars[name] = (value, lineno)
            continue
        body = rest[1:]
        rows, start = [], lineno
        pending = ""
        while True:
            end = body.find("]")
            chunk = body if end < 0 else body[:end]
            parts = (pending + " " + chunk).split(";")
            pending = parts.pop()
            for p in parts:
                if p.strip():
                    rows.append((_parse_row(p, lineno), lineno))
            if end >= 0:
                if pending.strip():
                    rows.append((_parse_row(pending, lineno), lineno))
                break
            if pending.strip():
                rows.append((_parse_row(pending, lineno), lineno))
                pending = ""
            if i >= len(lines):
                raise CaseParseError(f"matrix {name!r} is not closed", start)
            lineno = i + 1
            body = _strip_comment(lines[i])
            i += 1
        widths = {len(r) for r, _ in rows}
        if len(widths) > 1:
            bad = next(ln for r, ln in rows if len(r) != len(rows[0][0]))
            raise CaseParseError(f"matrix {name!r} has rows of different lengths", bad)
        tables[name] = (rows, start)
    return scalars, tables


def _matrix(tables, name, min_cols, required=True):
    if name not in tables:
        if required:
            raise CaseParseError(f"missing matrix {name!r}")
        return None, []
    rows, start = tables[name]
    if not rows:
        return np.zeros((0, min_cols)), []
    arr = np.array([r for r, _ in rows])
    if arr.shape[1] < min_cols:
        raise CaseParseError(f"matrix {name!r} needs at least {min_cols} columns", start)
    return arr, [ln for _, ln in rows]


def parse_matpower_case(text):
    """Parse the documented MATPOWER subset (baseMVA, bus, gen, branch, gencost)."""
    scalars, tables = _read_tables(text)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing baseMVA")
    value, ln = scalars["baseMVA"]
    try:
        base = float(value)
    except ValueError:
        raise CaseParseError("baseMVA is not a number", ln) from None
    bus, bus_lines = _matrix(tables, "bus", 13)
    gen, gen_lines = _matrix(tables, "gen", 10)
    branch, br_lines = _matrix(tables, "branch", 11)
    gencost, gc_lines = _matrix(tables, "gencost", 4)
    ids = set(bus[:, BUS_I].astype(int).tolist())
    for row, ln in zip(gen, gen_lines):
        if int(row[GEN_BUS]) not in ids:
            raise CaseParseError(f"generator at unknown bus {int(row[GEN_BUS])}", ln)
    for row, ln in zip(branch, br_lines):
        for col in (F_BUS, T_BUS):
            if int(row[col]) not in ids:
                raise CaseParseError(f"branch references unknown bus {int(row[col])}", ln)
        if branch.shape[1] > SHIFT and row[SHIFT] != 0:
            raise CaseParseError("phase-shifting transformers are not supported", ln)
    if gencost.shape[0] != gen.shape[0]:
        ln = gc_lines[gen.shape[0]] if gencost.shape[0] > gen.shape[0] else tables["gencost"][1]
        raise CaseParseError("gencost must have exactly one row per generator", ln)
    coeffs = np.zeros((gen.shape[0], 3))
    for k, (row, ln) in enumerate(zip(gencost, gc_lines)):
        if int(row[MODEL]) != 2:
            raise CaseParseError("only polynomial cost model 2 is supported", ln)
        n = int(row[NCOST])
        if n > 3:
            raise CaseParseError("cost polynomials above degree 2 are not supported", ln)
        if row.size < COST + n:
            raise CaseParseError("gencost row shorter than its coefficient count", ln)
        c = row[COST:COST + n]
        coeffs[k, 3 - n:] = c
    return OpfCase(base, bus, branch, gen, coeffs).validate()


def load_case(path):
    with open(path) as fh:
        return parse_matpower_case(fh.read())


def builtin_case(name):
    """Bundled fixture cases: ``case14`` and ``case118``."""
    text = resources.files("dipopt.data").joinpath(f"{name}.m").read_text()
    return parse_matpower_case(text)


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def format_matpower_case(case, name="case"):
    """Render a case in the same subset the parser accepts."""
    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {_fmt(case.base_mva)};"]
    gencost = np.column_stack([np.full(case.n_gen, 2.0), np.zeros((case.n_gen, 2)),
                               np.full(case.n_gen, 3.0), case.gencost])
    for key, mat in (("bus", case.bus), ("gen", case.gen), ("branch", case.branch),
                     ("gencost", gencost)):
        out.append(f"mpc.{key} = [")
        out.extend("\t" + "\t".join(_fmt(v) for v in row) + ";" for row in mat)
        out.append("];")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class TieLine:
    copy_a: int
    bus_a: int
    copy_b: int
    bus_b: int
    r: float = 0.01
    x: float = 0.05
    b: float = 0.0


def load_ties(source):
    """Read a tie spec: JSON list of ``{copy_a, bus_a, copy_b, bus_b, r, x, b}``."""
    if isinstance(source, (list, tuple)):
        doc = source
    else:
        with open(source) as fh:
            doc = json.load(fh)
        if isinstance(doc, dict):
            doc = doc["ties"]
    return [TieLine(**{k: v for k, v in t.items() if not k.startswith("_")}) for t in doc]


def builtin_ties(k):
    """Bundled tie specs for ``k`` copies of case118 (k in {2, 6})."""
    text = resources.files("dipopt.data").joinpath(f"ties_118x{k}.json").read_text()
    return load_ties(json.loads(text)["ties"])


def interconnect_copies(case, k, ties):
    """Join ``k`` renumbered copies of ``case`` with tie lines.

    Copy ``c`` (1-based) maps original bus ``b`` to ``(c-1)*offset + b``
    where ``offset`` is the smallest power of ten above the largest bus
    number.  Copies 2..k lose their slack (demoted to PV).  Returns the
    combined case and a map from new bus number to region (= copy index).
    """
    if k < 2:
        raise InstanceError("need at least two copies")
    ids = case.bus_ids
    offset = 10 ** len(str(int(ids.max())))
    buses, branches, gens, costs, regions = [], [], [], [], {}
    for c in range(k):
        bus = case.bus.copy()
        bus[:, BUS_I] += c * offset
        if c > 0:
            bus[bus[:, BUS_TYPE] == SLACK, BUS_TYPE] = PV
        br = case.branch.copy()
        br[:, [F_BUS, T_BUS]] += c * offset
        gen = case.gen.copy()
        gen[:, GEN_BUS] += c * offset
        buses.append(bus)
        branches.append(br)
        gens.append(gen)
        costs.append(case.gencost)
        regions.update({int(b): c + 1 for b in bus[:, BUS_I]})
    known = set(ids.tolist())
    width = case.branch.shape[1]
    for t in ties:
        if not (1 <= t.copy_a <= k and 1 <= t.copy_b <= k):
            raise InstanceError(f"tie {t} references a copy outside 1..{k}")
        if t.bus_a not in known or t.bus_b not in known:
            raise InstanceError(f"tie {t} references an unknown bus")
        if t.copy_a == t.copy_b:
            raise InstanceError(f"tie {t} connects a copy to itself")
        row = np.zeros(width)
        row[F_BUS] = (t.copy_a - 1) * offset + t.bus_a
        row[T_BUS] = (t.copy_b - 1) * offset + t.bus_b
        row[BR_R], row[BR_X], row[BR_B] = t.r, t.x, t.b
        row[BR_STATUS] = 1
        if width > 12:
            row[11], row[12] = -360, 360
        branches.append(row[None, :])
    combined = OpfCase(case.base_mva, np.vstack(buses), np.vstack(branches), np.vstack(gens),
                       np.vstack(costs)).validate()
    return combined, regions


def with_zero_charging(case):
    """Copy of ``case`` without line charging and bus shunts (test helper)."""
    bus, branch = case.bus.copy(), case.branch.copy()
    bus[:, [GS, BS]] = 0.0
    branch[:, BR_B] = 0.0
    return replace(case, bus=bus, branch=branch)
