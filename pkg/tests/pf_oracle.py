"""Independent Newton-Raphson power flow in polar coordinates (test oracle).

Builds its own admittance matrix branch by branch from the raw MATPOWER
tables and iterates on angles/magnitudes with a finite-difference free
analytic Jacobian.  Shares no code with the package.
"""
import numpy as np


def admittance(bus, branch, base_mva):
    ids = {int(b): i for i, b in enumerate(bus[:, 0])}
    n = len(ids)
    Y = np.zeros((n, n), dtype=complex)
    for row in branch:
        if row[10] == 0:
            continue
        f, t = ids[int(row[0])], ids[int(row[1])]
        y = 1.0 / complex(row[2], row[3])
        bc = row[4]
        tap = row[8] if row[8] != 0 else 1.0
        Y[f, f] += (y + 0.5j * bc) / tap ** 2
        Y[t, t] += y + 0.5j * bc
        Y[f, t] -= y / tap
        Y[t, f] -= y / tap
    Y[np.diag_indices(n)] += (bus[:, 4] + 1j * bus[:, 5]) / base_mva
    return Y


def injections(Y, V):
    return V * np.conj(Y @ V)


def newton_power_flow(bus, branch, gen, base_mva, tol=1e-12, max_iter=30):
    """Returns complex bus voltages; PV magnitudes and slack voltage from gen VG."""
    ids = {int(b): i for i, b in enumerate(bus[:, 0])}
    n = len(ids)
    Y = admittance(bus, branch, base_mva)
    kind = bus[:, 1].astype(int)
    Vm = np.ones(n)
    Va = np.zeros(n)
    Psp = -bus[:, 2] / base_mva
    Qsp = -bus[:, 3] / base_mva
    for g in gen:
        if g[7] <= 0:
            continue
        i = ids[int(g[0])]
        Psp[i] += g[1] / base_mva
        if kind[i] in (2, 3):
            Vm[i] = g[5]
    pvpq = np.flatnonzero(kind != 3)
    pq = np.flatnonzero(kind == 1)
    for _ in range(max_iter):
        V = Vm * np.exp(1j * Va)
        S = injections(Y, V)
        mis = np.r_[S.real[pvpq] - Psp[pvpq], S.imag[pq] - Qsp[pq]]
        if np.abs(mis).max() < tol:
            return V
        # dS/dVa and dS/dVm (standard polar derivatives)
        I = Y @ V
        dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y @ np.diag(V))
        dVm = np.diag(V) @ np.conj(Y @ np.diag(V / Vm)) + np.diag(np.conj(I) * V / Vm)
        J = np.block([
            [dVa.real[np.ix_(pvpq, pvpq)], dVm.real[np.ix_(pvpq, pq)]],
            [dVa.imag[np.ix_(pq, pvpq)], dVm.imag[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, -mis)
        Va[pvpq] += dx[:pvpq.size]
        Vm[pq] += dx[pvpq.size:]
    raise RuntimeError("power flow did not converge")
