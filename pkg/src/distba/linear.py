"""Block-sparse Hessian storage and the small dense kernels the solver needs.

Camera-space vectors have length ``9m`` and point-space vectors ``3n``;
both are flat arrays whose consecutive 9 (3) entries belong to one node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exactsum import Grid, grouped_digits, max_abs, segment_digits
from .jet import EdgeJacobianBatch
from .partition import EdgePartition
from .problem import CAMERA_DIM, POINT_DIM


class SingularBlockError(np.linalg.LinAlgError):
    """A diagonal block is not symmetric positive definite."""

    def __init__(self, index: int, kind: str = "block"):
        self.index = index
        self.kind = kind
        super().__init__(f"{kind} {index} is not positive definite (insufficient damping?)")


def _segments(keys: np.ndarray, num_segments: int) -> tuple[np.ndarray, np.ndarray]:
    """Stable grouping of ``keys``: returns (order, ptr) in CSR style."""
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=num_segments)
    ptr = np.zeros(num_segments + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return order, ptr


def _segment_sum(values: np.ndarray, order: np.ndarray, ptr: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Sum ``values`` grouped by segment; the result does not depend on term order."""
    grid = Grid.for_bound(max_abs(values), len(values))
    out[...] = grid.join(segment_digits(grid.split(values), order, ptr), out.dtype)
    return out


class BlockDiag:
    """Block-diagonal matrix of ``num_blocks`` dense ``block_size`` squares."""

    def __init__(self, blocks: np.ndarray):
        blocks = np.asarray(blocks)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError(f"blocks must be (nb, s, s), got {blocks.shape}")
        self.blocks = blocks

    @classmethod
    def zeros(cls, num_blocks: int, block_size: int, dtype=np.float64) -> "BlockDiag":
        return cls(np.zeros((num_blocks, block_size, block_size), dtype=dtype))

    @classmethod
    def identity(cls, num_blocks: int, block_size: int, dtype=np.float64) -> "BlockDiag":
        return cls(np.tile(np.eye(block_size, dtype=dtype), (num_blocks, 1, 1)))

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def dim(self) -> int:
        return self.num_blocks * self.block_size

    def copy(self) -> "BlockDiag":
        return BlockDiag(self.blocks.copy())

    def to_dense(self) -> np.ndarray:
        s, nb = self.block_size, self.num_blocks
        out = np.zeros((nb * s, nb * s), dtype=self.blocks.dtype)
        for i in range(nb):
            out[i * s:(i + 1) * s, i * s:(i + 1) * s] = self.blocks[i]
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: block-diagonal of size {self.dim}, vector {x.shape}")
        xb = x.reshape(self.num_blocks, self.block_size)
        return np.einsum("bij,bj->bi", self.blocks, xb).ravel()

    def factor(self) -> "FactoredBlockDiag":
        return FactoredBlockDiag(self)


class FactoredBlockDiag:
    """Per-block Cholesky factorisation kept as explicit SPD inverses.

    Factor once per damping value and reuse for every solve.
    """

    def __init__(self, D: BlockDiag, kind: str = "block"):
        blocks = D.blocks
        bad = ~np.all(np.isfinite(blocks), axis=(1, 2))
        if bad.any():
            raise SingularBlockError(int(np.flatnonzero(bad)[0]), kind)
        sym = 0.5 * (blocks + np.swapaxes(blocks, 1, 2))
        try:
            L = np.linalg.cholesky(sym)
        except np.linalg.LinAlgError:
            for i in range(len(sym)):
                try:
                    np.linalg.cholesky(sym[i])
                except np.linalg.LinAlgError:
                    raise SingularBlockError(i, kind) from None
            raise
        L_inv = np.linalg.inv(L)
        self.inverse = np.swapaxes(L_inv, 1, 2) @ L_inv
        self.block_size = D.block_size
        self.num_blocks = D.num_blocks

    @property
    def dim(self) -> int:
        return self.num_blocks * self.block_size

    def solve(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: block-diagonal of size {self.dim}, vector {x.shape}")
        xb = x.reshape(self.num_blocks, self.block_size)
        return np.einsum("bij,bj->bi", self.inverse, xb).ravel()


def blockdiag_apply(D: BlockDiag, x: np.ndarray) -> np.ndarray:
    return D.apply(x)


def blockdiag_solve(D, x: np.ndarray) -> np.ndarray:
    """Solve ``D y = x``; ``D`` may be a :class:`BlockDiag` or already factored."""
    if isinstance(D, BlockDiag):
        D = D.factor()
    return D.solve(x)


class SparseBlockMatrix:
    """Camera x point coupling blocks ``E_k``, one dense 9x3 block per edge.

    Blocks are stored in partition edge order. Copies sorted by camera and
    by point are kept so each SpMV produces its terms already grouped by
    output node. Call :meth:`blocks_changed` after writing into ``blocks``
    in place.
    """

    def __init__(self, rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray, num_cameras: int, num_points: int):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        if blocks.shape != (len(self.rows), CAMERA_DIM, POINT_DIM) or len(self.cols) != len(self.rows):
            raise ValueError("rows, cols and blocks must describe the same number of 9x3 blocks")
        self.num_cameras = num_cameras
        self.num_points = num_points
        self.row_order, self.row_ptr = _segments(self.rows, num_cameras)
        self.col_order, self.col_ptr = _segments(self.cols, num_points)
        self._cols_by_row = self.cols[self.row_order]
        self._rows_by_col = self.rows[self.col_order]
        self.block_ops = 0
        # (max |entry| over all ranks' blocks, total block count over all ranks);
        # set by whoever reduces the blocks, used to pick shared summation grids.
        self.shared_scale: tuple[float, int] | None = None
        self.blocks = blocks

    @property
    def blocks(self) -> np.ndarray:
        return self._blocks

    @blocks.setter
    def blocks(self, value: np.ndarray) -> None:
        self._blocks = value
        self.blocks_changed()

    def blocks_changed(self) -> None:
        self._by_row = self._blocks[self.row_order]
        self._by_col_t = np.swapaxes(self._blocks[self.col_order], 1, 2).copy()

    @property
    def nnz_blocks(self) -> int:
        return len(self.rows)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((CAMERA_DIM * self.num_cameras, POINT_DIM * self.num_points), dtype=self.blocks.dtype)
        for r, c, blk in zip(self.rows, self.cols, self.blocks):
            out[r * 9:(r + 1) * 9, c * 3:(c + 1) * 3] += blk
        return out

    def _terms_t(self, x: np.ndarray) -> np.ndarray:
        """Per-edge ``E_e^T x_r``, grouped by point."""
        if x.shape != (CAMERA_DIM * self.num_cameras,):
            raise ValueError(f"expected camera-space vector of length {9 * self.num_cameras}, got {x.shape}")
        xc = x.reshape(self.num_cameras, CAMERA_DIM)[self._rows_by_col]
        self.block_ops += self.nnz_blocks
        return np.einsum("eji,ei->ej", self._by_col_t, xc)

    def _terms(self, b: np.ndarray) -> np.ndarray:
        """Per-edge ``E_e b_c``, grouped by camera."""
        if b.shape != (POINT_DIM * self.num_points,):
            raise ValueError(f"expected point-space vector of length {3 * self.num_points}, got {b.shape}")
        bp = b.reshape(self.num_points, POINT_DIM)[self._cols_by_row]
        self.block_ops += self.nnz_blocks
        return np.einsum("eij,ej->ei", self._by_row, bp)

    def matvec_t(self, x: np.ndarray) -> np.ndarray:
        """``E^T x``: camera-space in, point-space out."""
        terms = self._terms_t(x)
        grid = Grid.for_bound(max_abs(terms), len(terms))
        return self._join(grid, grouped_digits(grid.split(terms), self.col_ptr), np.result_type(self.blocks, x))

    def matvec(self, b: np.ndarray) -> np.ndarray:
        """``E b``: point-space in, camera-space out."""
        terms = self._terms(b)
        grid = Grid.for_bound(max_abs(terms), len(terms))
        return self._join(grid, grouped_digits(grid.split(terms), self.row_ptr), np.result_type(self.blocks, b))

    @staticmethod
    def _join(grid: Grid, digits: np.ndarray, dtype) -> np.ndarray:
        return grid.join(digits, dtype).ravel()

    # Partial products as integer digits on a caller-supplied grid. Summing
    # them over ranks and joining gives a result independent of the split.

    def matvec_t_digits(self, x: np.ndarray, grid: Grid) -> np.ndarray:
        return grouped_digits(grid.split(self._terms_t(x)), self.col_ptr).reshape(grid.levels, -1)

    def matvec_digits(self, b: np.ndarray, grid: Grid) -> np.ndarray:
        return grouped_digits(grid.split(self._terms(b)), self.row_ptr).reshape(grid.levels, -1)


def spmv_Et(E: SparseBlockMatrix, x: np.ndarray) -> np.ndarray:
    return E.matvec_t(x)


def spmv_E(E: SparseBlockMatrix, b: np.ndarray) -> np.ndarray:
    return E.matvec(b)


@dataclass
class PartitionedHessian:
    """One worker's share ``H_k`` of the Gauss-Newton system."""

    B: BlockDiag
    C: BlockDiag
    E: SparseBlockMatrix
    v: np.ndarray
    w: np.ndarray

    @property
    def num_cameras(self) -> int:
        return self.B.num_blocks

    @property
    def num_points(self) -> int:
        return self.C.num_blocks


class HessianAssembler:
    """Builds ``H_k`` for a fixed partition, reusing storage across iterations."""

    def __init__(self, partition: EdgePartition, camera_index: np.ndarray, point_index: np.ndarray,
                 num_cameras: int, num_points: int, dtype=np.float64):
        ids = partition.edge_ids
        self.num_cameras = num_cameras
        self.num_points = num_points
        rows = camera_index[ids]
        cols = point_index[ids]
        self.hessian = PartitionedHessian(
            BlockDiag.zeros(num_cameras, CAMERA_DIM, dtype),
            BlockDiag.zeros(num_points, POINT_DIM, dtype),
            SparseBlockMatrix(rows, cols, np.zeros((len(ids), CAMERA_DIM, POINT_DIM), dtype), num_cameras, num_points),
            np.zeros(CAMERA_DIM * num_cameras, dtype),
            np.zeros(POINT_DIM * num_points, dtype),
        )
        self.block_ops = 0

    def load(self, batch: EdgeJacobianBatch) -> None:
        """Form the per-edge terms of ``H_k`` and the ``E_k`` blocks, without summing."""
        E = self.hessian.E
        if batch.num_edges != E.nnz_blocks:
            raise ValueError("batch does not belong to this partition")
        w = batch.weights
        wJc = batch.J_cam * w[:, None, None]
        wJp = batch.J_pt * w[:, None, None]
        r = batch.residuals
        np.einsum("eki,ekj->eij", wJc, batch.J_pt, out=E.blocks)
        E.blocks_changed()
        self._terms = (
            np.einsum("eki,ekj->eij", wJc, batch.J_cam),
            np.einsum("eki,ekj->eij", wJp, batch.J_pt),
            -np.einsum("eki,ek->ei", wJc, r),
            -np.einsum("eki,ek->ei", wJp, r),
        )
        self.block_ops += batch.num_edges

    def _segments_for(self, which: int):
        E = self.hessian.E
        return (E.row_order, E.row_ptr) if which in (0, 2) else (E.col_order, E.col_ptr)

    def term_bounds(self) -> np.ndarray:
        """Max |term| of B, C, v, w and max |E| entry, for choosing shared grids."""
        return np.array([max_abs(t) for t in self._terms] + [max_abs(self.hessian.E.blocks)])

    def digits(self, grids: list[Grid]) -> list[np.ndarray]:
        """Per-node partial sums of B, C, v, w as integer digits on ``grids``."""
        return [segment_digits(g.split(t), *self._segments_for(i)) for i, (g, t) in enumerate(zip(grids, self._terms))]

    def assemble(self, batch: EdgeJacobianBatch) -> PartitionedHessian:
        """Local ``H_k`` in floating point."""
        self.load(batch)
        H = self.hessian
        outs = (H.B.blocks, H.C.blocks, H.v.reshape(self.num_cameras, CAMERA_DIM), H.w.reshape(self.num_points, POINT_DIM))
        for i, (t, out) in enumerate(zip(self._terms, outs)):
            _segment_sum(t, *self._segments_for(i), out)
        return H


def assemble_local(batch: EdgeJacobianBatch, partition: EdgePartition, num_cameras: int, num_points: int,
                   camera_index: np.ndarray, point_index: np.ndarray) -> PartitionedHessian:
    asm = HessianAssembler(partition, camera_index, point_index, num_cameras, num_points, batch.residuals.dtype)
    return asm.assemble(batch)


def apply_lm_damping(B: BlockDiag, C: BlockDiag, lam: float, policy: str = "identity") -> tuple[BlockDiag, BlockDiag]:
    """Return damped copies of ``B`` and ``C``; the inputs are left untouched.

    ``identity`` adds ``lam * I``; ``diag-scaled`` adds ``lam * diag(H)``
    with the diagonal clamped to ``[1e-6, 1e32]``.
    """
    if lam < 0:
        raise ValueError(f"damping must be non-negative, got {lam}")
    out = []
    for D in (B, C):
        blocks = D.blocks.copy()
        idx = np.arange(D.block_size)
        if policy == "identity":
            blocks[:, idx, idx] += lam
        elif policy == "diag-scaled":
            blocks[:, idx, idx] += lam * np.clip(D.blocks[:, idx, idx], 1e-6, 1e32)
        else:
            raise ValueError(f"unknown damping policy {policy!r}")
        out.append(BlockDiag(blocks))
    return out[0], out[1]


def damping_diagonal(B: BlockDiag, C: BlockDiag, lam: float, policy: str = "identity") -> np.ndarray:
    """The diagonal added by :func:`apply_lm_damping`, as a flat ``9m + 3n`` vector."""
    if policy == "identity":
        return np.full(B.dim + C.dim, lam, dtype=B.blocks.dtype)
    diag = np.concatenate([np.diagonal(B.blocks, axis1=1, axis2=2).ravel(),
                           np.diagonal(C.blocks, axis1=1, axis2=2).ravel()])
    return lam * np.clip(diag, 1e-6, 1e32)
