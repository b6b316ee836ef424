"""Decentralized primal-dual interior point method for coupled NLPs."""
from .problem import (
    PartitionedNlp,
    Subsystem,
    SubsystemPoint,
    KktResidual,
    consensus_violation,
    kkt_residual,
    load_pnlp,
)
from .driver import SolverOptions, Status, solve
from .oracle import solve_centralized_barrier_newton

__version__ = "0.1.0"
