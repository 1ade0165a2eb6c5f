"""Multi-worker bundle adjustment: edge partitioning, distributed Schur
elimination, distributed PCG and a Levenberg-Marquardt outer loop."""

__version__ = "0.1.0"

from .comms import WorkerGroup, allreduce_sum, barrier, run_workers
from .jet import EdgeEvaluator, EdgeJacobianBatch, JetVector, evaluate_edges, rotate_angle_axis
from .linear import (
    BlockDiag,
    PartitionedHessian,
    SparseBlockMatrix,
    apply_lm_damping,
    assemble_local,
    blockdiag_apply,
    blockdiag_solve,
    spmv_E,
    spmv_Et,
)
from .partition import EdgePartition, build_local_maps, partition_edges
from .problem import (
    BAProblem,
    CameraState,
    Observation,
    PointState,
    add_edge,
    add_node,
    load_bal,
    parse_bal,
    residual,
    total_cost,
    write_bal,
)
from .solver import SolverConfig, SolverState, check_convergence, dpcg, dse, lm_solve, solve
