import numpy as np
import pytest
import scipy.sparse as sp

from dipopt.agent import assemble_local_kkt
from dipopt.driver import SolverOptions
from dipopt.oracle import (FullKkt, assemble_full_kkt, direct_newton_step,
                           solve_centralized_barrier_newton)
from dipopt.problem import PartitionedNlp, Subsystem, SubsystemPoint, kkt_residual

from conftest import bounded_qp, equality_qp, random_convex_qp, random_interior_points


def test_unused_coupling_row_has_empty_border():
    sub = Subsystem.quadratic([[2.0]], [1.0], sp.csr_matrix((1, 1)), J=[[1.0]], h0=[-1.0])
    p = PartitionedNlp([sub], np.zeros(1))
    full = assemble_full_kkt(p, [SubsystemPoint([0.0], [1.0], [], [0.5])], np.zeros(1), 0.1)
    M = full.matrix.toarray()
    assert full.order == 3 + 1
    assert not M[-1].any() and not M[:, -1].any()


def test_two_block_arrowhead_by_hand():
    p = equality_qp()
    pts = [SubsystemPoint([0.5], [], [], []), SubsystemPoint([0.25], [], [], [])]
    full = assemble_full_kkt(p, pts, np.array([0.0]), 0.0)
    assert full.matrix.toarray().tolist() == [[1, 0, 1], [0, 1, 1], [1, 1, 0]]
    # rhs = (-F_1, -F_2, b - A x)
    assert full.rhs.tolist() == [-0.5, -0.25, 2.0 - 0.75]


@pytest.mark.parametrize("seed", range(4))
def test_diagonal_blocks_equal_local_matrices(seed):
    rng = np.random.default_rng(seed)
    p = random_convex_qp(rng)
    pts = random_interior_points(rng, p)
    full = assemble_full_kkt(p, pts, rng.standard_normal(p.n_c), 0.2)
    M = full.matrix.toarray()
    off = full.offsets
    assert full.order == off[-1] + p.n_c
    for i, (sub, pt) in enumerate(zip(p.subsystems, pts)):
        local = assemble_local_kkt(sub, pt, i).matrix
        assert np.array_equal(M[off[i]:off[i + 1], off[i]:off[i + 1]], local)
        # no cross-subsystem entries
        rest = np.delete(M[off[i]:off[i + 1], :off[-1]], np.s_[off[i]:off[i + 1]], axis=1)
        assert not rest.any()


def _full(M, rhs):
    n = M.shape[0]
    return FullKkt(sp.csc_matrix(M), np.asarray(rhs, dtype=float), np.array([0, n]),
                   [(n, 0, 0, 0)], 0, [])


def test_direct_step_identity_and_zero():
    steps, dlam, rho = direct_newton_step(_full(np.eye(3), [1.0, 2.0, 3.0]))
    assert steps[0].x.tolist() == [1.0, 2.0, 3.0] and dlam.size == 0 and rho == 0.0
    steps, _, _ = direct_newton_step(_full(np.diag([2.0, 3.0]), [0.0, 0.0]))
    assert steps[0].x.tolist() == [0.0, 0.0]


@pytest.mark.parametrize("seed", range(5))
def test_direct_step_residual(seed):
    rng = np.random.default_rng(seed)
    p = random_convex_qp(rng)
    pts = random_interior_points(rng, p)
    full = assemble_full_kkt(p, pts, rng.standard_normal(p.n_c), 0.1)
    steps, dlam, _ = direct_newton_step(full)
    sol = np.concatenate([s.stacked() for s in steps] + [dlam])
    assert np.abs(full.matrix @ sol - full.rhs).max() <= 1e-10 * max(1, np.abs(full.rhs).max())


def test_centralized_equality_qp():
    ref = solve_centralized_barrier_newton(equality_qp())
    assert ref.converged
    assert np.allclose(ref.x, [1.0, 1.0], atol=1e-8) and ref.f == pytest.approx(1.0, abs=1e-8)


def test_centralized_bounded_qp():
    ref = solve_centralized_barrier_newton(bounded_qp())
    assert ref.converged
    assert np.allclose(ref.x, [0.8, 1.2], atol=1e-8) and ref.f == pytest.approx(1.04, abs=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_oracle_kkt_point_residual(seed):
    rng = np.random.default_rng(40 + seed)
    p = random_convex_qp(rng)
    ref = solve_centralized_barrier_newton(p, SolverOptions(tol=1e-8))
    res = ref.result
    assert ref.converged
    assert kkt_residual(p, res.points, res.lam, 0.0).inf_norm <= 1e-8
    assert kkt_residual(p, res.points, res.lam, res.delta).inf_norm <= 1e-8
