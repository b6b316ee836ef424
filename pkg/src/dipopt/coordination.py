"""Bulk-synchronous message fabric and decentralized conjugate gradients.

Agents never share their ``S_i``.  Each CG iteration every agent sends
its local product ``S_i q`` and one scalar ``q'S_i q``; the bus sums them
in fixed agent order, which keeps transcripts and iterates bit-identical
from run to run.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import CurvatureError

__all__ = ["Message", "MessageBus", "CgState", "dcg_solve", "comm_report", "PHASES"]

PHASES = ("schur", "cg", "reduction")


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: str
    size: int
    phase: str


class MessageBus:
    """Synchronous rounds; every reduction is one round and one message per agent."""

    def __init__(self, n_agents, keep_log=True):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.n_agents = n_agents
        self.round = 0
        self.keep_log = keep_log
        self.log: list[Message] = []
        self.messages = 0
        self.floats = 0
        self.phase_floats = defaultdict(int)
        self.phase_messages = defaultdict(int)

    def _deliver(self, sizes, phase):
        for sender, size in enumerate(sizes):
            if self.keep_log:
                self.log.append(Message(self.round, sender, "all", size, phase))
            self.messages += 1
            self.floats += size
            self.phase_messages[phase] += 1
            self.phase_floats[phase] += size
        self.round += 1

    def global_sum(self, vectors, phase="cg"):
        vectors = [np.atleast_1d(np.asarray(v, dtype=float)) for v in vectors]
        if len(vectors) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} contributions, got {len(vectors)}")
        n = vectors[0].shape
        if any(v.shape != n for v in vectors):
            raise ValueError("contributions have different lengths")
        self._deliver([v.size for v in vectors], phase)
        total = np.zeros(n)
        for v in vectors:
            total = total + v
        return total

    def _scalars(self, values, phase):
        values = [float(v) for v in values]
        if len(values) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} contributions, got {len(values)}")
        self._deliver([1] * len(values), phase)
        return values

    def global_min(self, values, phase="reduction"):
        return min(self._scalars(values, phase))

    def global_max(self, values, phase="reduction"):
        return max(self._scalars(values, phase))

    def transcript_lines(self):
        for m in self.log:
            yield json.dumps({"round": m.round, "sender": m.sender, "receiver": m.receiver,
                              "size": m.size, "phase": m.phase})

    def write_transcript(self, path):
        with open(path, "w") as fh:
            for line in self.transcript_lines():
                fh.write(line + "\n")


def comm_report(bus):
    """Totals per phase plus overall counters."""
    report = {"rounds": bus.round, "messages": bus.messages, "floats": bus.floats}
    for phase in PHASES:
        report[f"{phase}_messages"] = bus.phase_messages.get(phase, 0)
        report[f"{phase}_floats"] = bus.phase_floats.get(phase, 0)
    return report


@dataclass
class CgState:
    lam: np.ndarray
    r: np.ndarray
    q: np.ndarray
    iterations: int = 0
    history: list = field(default_factory=list)
    inexact: bool = False


def dcg_solve(contributions, bus, tol_abs, max_iter, warm_start=None, allow_indefinite=False):
    """CG on ``(sum S_i) dlam = sum s_i`` with matrix action assembled over the bus.

    Stops once ``||r||_2 <= tol_abs``.  Hitting ``max_iter`` first is not an
    error: the returned state carries ``inexact=True``.  Nonpositive
    curvature raises :class:`CurvatureError`; with ``allow_indefinite`` only
    an exact breakdown (zero or non-finite curvature) does, and CG simply
    continues on the symmetric indefinite system.
    """
    n_c = contributions[0].s.size
    s = bus.global_sum([c.s for c in contributions], phase="schur")
    if warm_start is not None and np.any(warm_start):
        lam = np.array(warm_start, dtype=float)
        r = s - bus.global_sum([c.S @ lam for c in contributions], phase="cg")
    else:
        lam = np.zeros(n_c)
        r = s.copy()
    q = r.copy()
    rr = float(r @ r)
    state = CgState(lam, r, q, 0, [float(np.sqrt(rr))])
    while np.sqrt(rr) > tol_abs and state.iterations < max_iter:
        local = [c.S @ q for c in contributions]
        Sq = bus.global_sum(local, phase="cg")
        curvature = bus.global_sum([[q @ v] for v in local], phase="cg")[0]
        ok = curvature > 0.0 or (allow_indefinite and curvature < 0.0 and np.isfinite(curvature))
        if not ok:
            raise CurvatureError(
                f"q'Sq = {curvature:.3e} at CG iteration {state.iterations}: "
                "coupling Schur complement is not positive definite" if not allow_indefinite
                else "CG breakdown"
            )
        alpha = rr / curvature
        lam = lam + alpha * q
        r = r - alpha * Sq
        rr_new = float(r @ r)
        q = r + (rr_new / rr) * q
        rr = rr_new
        state.iterations += 1
        state.history.append(float(np.sqrt(rr)))
    state.lam, state.r, state.q = lam, r, q
    state.inexact = bool(np.sqrt(rr) > tol_abs)
    return lam, state
