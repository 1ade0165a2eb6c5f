"""Distributed Levenberg-Marquardt with Schur elimination and PCG.

Each worker rank owns one edge partition. Ranks evaluate and assemble their
share of the Gauss-Newton system, then meet only in all-reduce collectives;
every reduced quantity (and therefore every solver decision) is identical
on all ranks.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .comms import WorkerGroup, run_workers
from .exactsum import Grid, max_abs
from .jet import EdgeEvaluator
from .linear import (
    BlockDiag,
    FactoredBlockDiag,
    HessianAssembler,
    SingularBlockError,
    SparseBlockMatrix,
    apply_lm_damping,
    damping_diagonal,
)
from .partition import EdgePartition, partition_edges
from .problem import CAMERA_DIM, POINT_DIM, BAProblem, DegenerateDepthError, mse

log = logging.getLogger(__name__)

PRECISIONS = {"fp32": np.float32, "fp64": np.float64}


class PcgBreakdownError(ArithmeticError):
    """Loss of positive definiteness (or a non-finite scalar) inside PCG."""


@dataclass
class SolverConfig:
    precision: str = "fp64"
    workers: int = 1
    max_iterations: int = 50
    pcg_tol: float = 1e-6
    pcg_max_iters: int = 500
    lambda0: float = 1e-4
    lambda_max: float = 1e32
    rel_tol: float = 1e-6
    step_tol: float = 1e-8
    damping: str = "identity"
    mse_convention: str = "N"
    jacobian: str = "auto"
    shuffle_seed: int | None = None
    debug: bool = False
    timeout: float = 300.0

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.damping not in ("identity", "diag-scaled"):
            raise ValueError(f"unknown damping policy {self.damping!r}")
        if self.mse_convention not in ("N", "2N"):
            raise ValueError(f"unknown MSE convention {self.mse_convention!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    mse: float
    lam: float
    pcg_iterations: int
    accepted: bool
    wall_time: float
    trial_cost: float = float("nan")
    gain_ratio: float = float("nan")
    step_norm: float = float("nan")
    work: dict = field(default_factory=dict)


@dataclass
class SolverState:
    x_c: np.ndarray
    x_p: np.ndarray
    lam: float
    nu: float = 2.0
    iteration: int = 0
    cost: float = float("nan")
    initial_cost: float = float("nan")
    history: list[IterationRecord] = field(default_factory=list)
    termination: str = "continue"

    @property
    def cameras(self) -> np.ndarray:
        return self.x_c.reshape(-1, CAMERA_DIM)

    @property
    def points(self) -> np.ndarray:
        return self.x_p.reshape(-1, POINT_DIM)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.x_c, self.x_p])

    def accepted_costs(self) -> list[float]:
        return [self.initial_cost] + [h.cost for h in self.history if h.accepted]


@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


# -- Schur elimination and PCG -------------------------------------------------


def _coupling_scale(E_k: SparseBlockMatrix, group: WorkerGroup, rank: int) -> tuple[float, int]:
    if E_k.shared_scale is None:
        emax = float(group.allreduce_max(rank, np.array([max_abs(E_k.blocks)]))[0])
        total = int(group.allreduce_sum(rank, np.array([E_k.nnz_blocks]))[0])
        return emax, total
    return E_k.shared_scale


def allreduce_Et(E_k: SparseBlockMatrix, x: np.ndarray, group: WorkerGroup, rank: int) -> np.ndarray:
    """``sum_k E_k^T x``, bitwise independent of how edges are split across ranks."""
    emax, total = _coupling_scale(E_k, group, rank)
    grid = Grid.for_bound(CAMERA_DIM * emax * max_abs(x), total)
    return grid.join(group.allreduce_sum(rank, E_k.matvec_t_digits(x, grid)), x.dtype)


def allreduce_E(E_k: SparseBlockMatrix, b: np.ndarray, group: WorkerGroup, rank: int) -> np.ndarray:
    """``sum_k E_k b``, bitwise independent of how edges are split across ranks."""
    emax, total = _coupling_scale(E_k, group, rank)
    grid = Grid.for_bound(POINT_DIM * emax * max_abs(b), total)
    return grid.join(group.allreduce_sum(rank, E_k.matvec_digits(b, grid)), b.dtype)


def allreduce_cost(terms: np.ndarray, group: WorkerGroup, rank: int, total: int) -> float:
    """Global sum of per-edge cost terms; ``inf`` if any rank has a non-finite term."""
    bound = float(group.allreduce_max(rank, np.array([max_abs(terms)]))[0])
    if not np.isfinite(bound):
        return float("inf")
    grid = Grid.for_bound(bound, total)
    digits = grid.split(terms).sum(axis=1)
    return float(grid.join(group.allreduce_sum(rank, digits), np.float64))


def reduce_hessian(assembler: HessianAssembler, batch, group: WorkerGroup, rank: int,
                   total_edges: int) -> tuple[BlockDiag, BlockDiag, np.ndarray, np.ndarray]:
    """Global ``B, C, v, w`` from every rank's share (Algorithm-1 style all-reduce).

    Also records the global scale of ``E`` on the assembler's ``E_k`` so that
    later products can be reduced without an extra collective.
    """
    assembler.load(batch)
    bounds = group.allreduce_max(rank, assembler.term_bounds())
    if not np.all(np.isfinite(bounds)):
        raise FloatingPointError("non-finite Jacobian or residual")
    grids = [Grid.for_bound(b, total_edges) for b in bounds[:4]]
    dtype = batch.residuals.dtype
    B, C, v, w = (g.join(group.allreduce_sum(rank, d), dtype) for g, d in zip(grids, assembler.digits(grids)))
    assembler.hessian.E.shared_scale = (float(bounds[4]), total_edges)
    return BlockDiag(B), BlockDiag(C), v.ravel(), w.ravel()


def dse(x: np.ndarray, B: BlockDiag, E_k: SparseBlockMatrix, C_inv: FactoredBlockDiag,
        group: WorkerGroup, rank: int) -> np.ndarray:
    """Apply the Schur complement ``(B - E C^-1 E^T) x`` with partitioned ``E``."""
    a = allreduce_Et(E_k, x, group, rank)
    b = C_inv.solve(a)
    c = allreduce_E(E_k, b, group, rank)
    d = B.apply(x)
    return d - c


def dpcg(x0: np.ndarray, B: BlockDiag, E_k: SparseBlockMatrix, C, g: np.ndarray,
         group: WorkerGroup, rank: int, tol: float = 1e-6, max_iters: int = 500,
         B_inv: FactoredBlockDiag | None = None, debug: bool = False) -> PcgResult:
    """Block-Jacobi preconditioned CG on the reduced camera system.

    ``C`` may be a :class:`BlockDiag` or its factorisation. Stops when
    ``||r|| <= tol * ||g||`` or after ``max_iters`` iterations.
    """
    C_inv = C if isinstance(C, FactoredBlockDiag) else FactoredBlockDiag(C, "point block")
    if B_inv is None:
        B_inv = FactoredBlockDiag(B, "camera block")
    x = np.array(x0, dtype=g.dtype, copy=True)
    r = g - dse(x, B, E_k, C_inv, group, rank)
    threshold = tol * np.linalg.norm(g)
    p = None
    rho_prev = 0.0
    n = 0
    while np.linalg.norm(r) > threshold and n < max_iters:
        z = B_inv.solve(r)
        rho = float(r @ z)
        if n > 0:
            p = z + (rho / rho_prev) * p
        else:
            p = z
        q = dse(p, B, E_k, C_inv, group, rank)
        pq = float(p @ q)
        if not (np.isfinite(rho) and np.isfinite(pq)) or pq <= 0.0:
            raise PcgBreakdownError(f"PCG breakdown at iteration {n}: rho={rho}, p.q={pq}")
        alpha = rho / pq
        x += alpha * p
        r -= alpha * q
        rho_prev = rho
        n += 1
        if debug:
            group.assert_identical(rank, np.array([rho, alpha]), "PCG scalars")
            if n % 50 == 0:
                drift = np.linalg.norm(r - (g - dse(x, B, E_k, C_inv, group, rank)))
                log.debug("rank %d PCG iter %d recursive-residual drift %.3e", rank, n, drift)
    return PcgResult(x, n, float(np.linalg.norm(r)))


# -- convergence -----------------------------------------------------------------


def check_convergence(state: SolverState, config: SolverConfig) -> str:
    """One of ``continue``, ``converged``, ``stalled`` or ``max_iters``."""
    if state.history:
        last = state.history[-1]
        if last.accepted:
            prev = state.accepted_costs()[-2]
            if abs(prev - last.cost) <= config.rel_tol * prev or last.step_norm < config.step_tol:
                return "converged"
    if state.lam > config.lambda_max:
        return "stalled"
    if state.iteration >= config.max_iterations:
        return "max_iters"
    return "continue"


# -- LM outer loop -------------------------------------------------------------


def _nielsen_factor(rho: float) -> float:
    return max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)


def lm_solve(problem: BAProblem, partition: EdgePartition, config: SolverConfig,
             group: WorkerGroup, rank: int,
             callback: Callable[[int, IterationRecord], None] | None = None) -> SolverState:
    """Run the distributed LM loop as worker ``rank`` (collective over ``group``)."""
    dtype = config.dtype
    m, n = problem.num_cameras, problem.num_points
    n_obs = problem.num_observations
    evaluator = EdgeEvaluator(problem, partition, dtype, config.jacobian)
    assembler = HessianAssembler(partition, problem.camera_index, problem.point_index, m, n, dtype)
    E_k = assembler.hessian.E

    state = SolverState(
        x_c=problem.cameras.astype(dtype).ravel(),
        x_p=problem.points.astype(dtype).ravel(),
        lam=config.lambda0,
    )
    state.cost = allreduce_cost(evaluator.cost_terms(state.cameras, state.points), group, rank, n_obs)
    state.initial_cost = state.cost
    start = time.monotonic()
    relinearize = True
    B = C = v = w = None

    while True:
        work0 = (evaluator.edges_evaluated, E_k.block_ops, assembler.block_ops)
        if relinearize:
            batch = evaluator.evaluate(state.cameras, state.points)
            B, C, v, w = reduce_hessian(assembler, batch, group, rank, n_obs)

        pcg_iters = 0
        step_ok = True
        try:
            B_d, C_d = apply_lm_damping(B, C, state.lam, config.damping)
            B_inv = FactoredBlockDiag(B_d, "camera block")
            C_inv = FactoredBlockDiag(C_d, "point block")
            alpha = allreduce_E(E_k, C_inv.solve(w), group, rank)
            g = v - alpha
            pcg = dpcg(np.zeros_like(g), B_d, E_k, C_inv, g, group, rank,
                       config.pcg_tol, config.pcg_max_iters, B_inv=B_inv, debug=config.debug)
            pcg_iters = pcg.iterations
            dx_c = pcg.x
            beta = allreduce_Et(E_k, dx_c, group, rank)
            dx_p = C_inv.solve(w - beta)
        except (SingularBlockError, PcgBreakdownError) as exc:
            log.debug("rank %d: linear solve failed at lambda=%g: %s", rank, state.lam, exc)
            step_ok = False

        trial_cost = float("inf")
        rho = float("-inf")
        step_norm = float("nan")
        if step_ok:
            x_c_new = state.x_c + dx_c
            x_p_new = state.x_p + dx_p
            try:
                terms = evaluator.cost_terms(x_c_new.reshape(-1, CAMERA_DIM), x_p_new.reshape(-1, POINT_DIM))
            except DegenerateDepthError:
                terms = np.array([np.inf])
            trial_cost = allreduce_cost(terms, group, rank, n_obs)
            dx = np.concatenate([dx_c, dx_p])
            step_norm = float(np.max(np.abs(dx))) if len(dx) else 0.0
            model = float(dx @ (damping_diagonal(B, C, state.lam, config.damping) * dx + np.concatenate([v, w])))
            actual = state.cost - trial_cost
            if model > 0:
                rho = actual / model
            elif actual >= 0:
                rho = 0.0 if actual == 0 else float("inf")
            accepted = bool(np.isfinite(trial_cost)) and (rho > 0 or (model <= 0 and actual >= 0))
        else:
            accepted = False

        if accepted:
            state.x_c, state.x_p = x_c_new, x_p_new
            state.cost = trial_cost
            if np.isfinite(rho) and model > 0:
                state.lam *= _nielsen_factor(rho)
            state.nu = 2.0
            relinearize = True
        else:
            state.lam *= state.nu
            state.nu *= 2.0
            relinearize = False

        state.iteration += 1
        record = IterationRecord(
            iteration=state.iteration,
            cost=state.cost,
            mse=mse(state.cost, n_obs, config.mse_convention),
            lam=state.lam,
            pcg_iterations=pcg_iters,
            accepted=accepted,
            wall_time=time.monotonic() - start,
            trial_cost=trial_cost,
            gain_ratio=rho,
            step_norm=step_norm,
            work={
                "edge_evaluations": evaluator.edges_evaluated - work0[0],
                "e_block_products": E_k.block_ops - work0[1],
                "assembled_edges": assembler.block_ops - work0[2],
            },
        )
        state.history.append(record)
        if callback is not None:
            callback(rank, record)
        if config.debug:
            group.assert_identical(rank, state.parameters(), "state x")
            group.assert_identical(rank, np.array([state.lam, state.cost]), "lambda/cost")

        decision = check_convergence(state, config)
        if decision != "continue":
            state.termination = decision
            break
    return state


def solve(problem: BAProblem, config: SolverConfig | None = None,
          callback: Callable[[int, IterationRecord], None] | None = None) -> SolverState:
    """Partition ``problem`` over ``config.workers`` ranks and run LM to termination.

    Returns rank 0's state; all ranks are checked to hold identical results.
    """
    config = config or SolverConfig()
    partitions = partition_edges(problem, config.workers, config.shuffle_seed)

    def worker(group: WorkerGroup, rank: int) -> SolverState:
        return lm_solve(problem, partitions[rank], config, group, rank, callback)

    states = run_workers(config.workers, worker, timeout=config.timeout)
    ref = states[0]
    for r, st in enumerate(states[1:], 1):
        if not (np.array_equal(st.x_c, ref.x_c) and np.array_equal(st.x_p, ref.x_p)):
            raise RuntimeError(f"rank {r} finished with a state different from rank 0")
    return ref


def final_mse(state: SolverState, num_observations: int, convention: str = "N") -> float:
    return mse(state.cost, num_observations, convention)
