import numpy as np
import pytest
import scipy.sparse as sp

from dipopt.problem import PartitionedNlp, Subsystem, SubsystemPoint

TWO_BUS = """\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
  1 3 0  0  0 0 1 1 0 135 1 1.1 0.9;
  2 1 50 20 0 0 1 1 0 135 1 1.1 0.9;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
  1 0 0 100 -100 1.02 100 1 200 0;
];
mpc.branch = [
  1 2 0 0.1 0 250 250 250 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.01 20 5;
];
"""


@pytest.fixture
def two_bus_text():
    return TWO_BUS


def equality_qp():
    """min 1/2 x1^2 + 1/2 x2^2  s.t.  x1 + x2 = 2, one variable per subsystem."""
    s1 = Subsystem.quadratic([[1.0]], [0.0], sp.csr_matrix([[1.0]]), name="s1")
    s2 = Subsystem.quadratic([[1.0]], [0.0], sp.csr_matrix([[1.0]]), name="s2")
    return PartitionedNlp([s1, s2], np.array([2.0]))


def bounded_qp():
    """The equality QP plus x1 <= 0.8 written as h = x1 - 0.8."""
    s1 = Subsystem.quadratic([[1.0]], [0.0], sp.csr_matrix([[1.0]]), J=[[1.0]], h0=[-0.8],
                             name="s1")
    s2 = Subsystem.quadratic([[1.0]], [0.0], sp.csr_matrix([[1.0]]), name="s2")
    return PartitionedNlp([s1, s2], np.array([2.0]))


def random_convex_qp(rng, n_sub=None, n_c=None):
    """Partitioned strictly convex QP with affine equalities and inequalities."""
    n_sub = n_sub or int(rng.integers(2, 5))
    n_c = n_c or int(rng.integers(1, 9))
    subs = []
    for i in range(n_sub):
        n = int(rng.integers(3, 21))
        M = rng.standard_normal((n, n))
        H = M @ M.T / n + 0.5 * np.eye(n)
        n_g = int(rng.integers(0, min(3, n - 1) + 1))
        n_h = int(rng.integers(0, 5))
        A = rng.standard_normal((n_c, n)) * (rng.random((n_c, n)) < 0.4)
        subs.append(Subsystem.quadratic(
            H, rng.standard_normal(n), sp.csr_matrix(A),
            G=rng.standard_normal((n_g, n)), g0=rng.standard_normal(n_g),
            J=rng.standard_normal((n_h, n)), h0=rng.standard_normal(n_h) - 2.0,
            name=f"s{i + 1}"))
    # make sure every coupling row is used by someone
    first = subs[0]
    A0 = first.A.toarray()
    A0[:, 0] += 1.0
    subs[0] = Subsystem(first.n_x, first.n_g, first.n_h, first.evaluator, sp.csr_matrix(A0),
                        first.name)
    return PartitionedNlp(subs, rng.standard_normal(n_c))


def random_interior_points(rng, problem):
    pts = []
    for sub in problem.subsystems:
        pts.append(SubsystemPoint(rng.standard_normal(sub.n_x), rng.uniform(0.2, 2.0, sub.n_h),
                                  rng.standard_normal(sub.n_g), rng.uniform(0.2, 2.0, sub.n_h)))
    return pts
