"""Structure-of-Arrays forward-mode auto-diff over batches of edges.

A :class:`JetVector` holds ``n`` dual numbers with ``d`` gradient lanes.
Gradients are stored lane-major: ``grads[j]`` is one contiguous length-``n``
array holding the derivative of every element w.r.t. local parameter ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .exactsum import exact_sum
from .partition import EdgePartition
from .problem import CAMERA_DIM, POINT_DIM, SMALL_ANGLE_SQ, BAProblem, DegenerateDepthError

LOCAL_DIM = CAMERA_DIM + POINT_DIM

Operand = Union["JetVector", float, np.ndarray]


class JetShapeError(ValueError):
    pass


class JetVector:
    __slots__ = ("values", "grads")

    def __init__(self, values: np.ndarray, grads: np.ndarray):
        values = np.ascontiguousarray(values)
        grads = np.ascontiguousarray(grads, dtype=values.dtype)
        if values.ndim != 1 or grads.ndim != 2 or grads.shape[1] != values.shape[0]:
            raise JetShapeError(
                f"values must be (n,) and grads (d, n); got {values.shape} and {grads.shape}"
            )
        self.values = values
        self.grads = grads

    # -- construction -------------------------------------------------------

    @classmethod
    def constant(cls, values, d: int, dtype=np.float64) -> "JetVector":
        values = np.asarray(values, dtype=dtype)
        return cls(values, np.zeros((d, len(values)), dtype=dtype))

    @classmethod
    def variable(cls, values, lane: int, d: int, dtype=np.float64) -> "JetVector":
        """Jet seeded with a unit derivative on gradient lane ``lane``."""
        values = np.asarray(values, dtype=dtype)
        grads = np.zeros((d, len(values)), dtype=dtype)
        if d:
            grads[lane] = 1.0
        return cls(values, grads)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.grads.shape[0]

    @property
    def dtype(self):
        return self.values.dtype

    def lane(self, j: int) -> np.ndarray:
        return self.grads[j]

    def __repr__(self) -> str:
        return f"JetVector(n={self.n}, d={self.d}, dtype={self.dtype})"

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other: Operand):
        if isinstance(other, JetVector):
            if other.n != self.n or other.d != self.d:
                raise JetShapeError(
                    f"operand shape mismatch: (n={self.n}, d={self.d}) vs (n={other.n}, d={other.d})"
                )
            return other
        arr = np.asarray(other, dtype=self.dtype)
        if arr.ndim == 0 or arr.shape == (self.n,):
            return arr
        raise JetShapeError(f"cannot broadcast constant of shape {arr.shape} against n={self.n}")

    def __add__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        if isinstance(o, JetVector):
            return JetVector(self.values + o.values, self.grads + o.grads)
        return JetVector(self.values + o, self.grads.copy())

    __radd__ = __add__

    def __sub__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        if isinstance(o, JetVector):
            return JetVector(self.values - o.values, self.grads - o.grads)
        return JetVector(self.values - o, self.grads.copy())

    def __rsub__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        return JetVector(o - self.values, -self.grads)

    def __mul__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        if isinstance(o, JetVector):
            return JetVector(self.values * o.values, self.grads * o.values + o.grads * self.values)
        return JetVector(self.values * o, self.grads * o)

    __rmul__ = __mul__

    def __truediv__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        if isinstance(o, JetVector):
            _check_nonzero(o.values)
            inv = 1.0 / o.values
            v = self.values * inv
            return JetVector(v, (self.grads - o.grads * v) * inv)
        _check_nonzero(np.broadcast_to(o, self.values.shape))
        return JetVector(self.values / o, self.grads / o)

    def __rtruediv__(self, other: Operand) -> "JetVector":
        o = self._coerce(other)
        _check_nonzero(self.values)
        inv = 1.0 / self.values
        v = o * inv
        return JetVector(np.broadcast_to(v, self.values.shape).copy(), -self.grads * (v * inv))

    def __neg__(self) -> "JetVector":
        return JetVector(-self.values, -self.grads)

    # -- elementary functions -----------------------------------------------

    def sqrt(self) -> "JetVector":
        bad = np.flatnonzero(~(self.values > 0))
        if len(bad):
            raise ValueError(f"sqrt of non-positive value {self.values[bad[0]]} at element {bad[0]}")
        root = np.sqrt(self.values)
        return JetVector(root, self.grads * (0.5 / root))

    def sin(self) -> "JetVector":
        return JetVector(np.sin(self.values), self.grads * np.cos(self.values))

    def cos(self) -> "JetVector":
        return JetVector(np.cos(self.values), self.grads * -np.sin(self.values))


def _check_nonzero(values: np.ndarray) -> None:
    zero = np.flatnonzero(values == 0)
    if len(zero):
        raise ZeroDivisionError(f"division by zero at element {zero[0]}")


def jv_binary(op: str, a: JetVector, b: Operand) -> JetVector:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    raise ValueError(f"unknown operator {op!r}")


def jv_elementary(op: str, a: JetVector) -> JetVector:
    if op == "sqrt":
        return a.sqrt()
    if op == "neg":
        return -a
    if op == "sin":
        return a.sin()
    if op == "cos":
        return a.cos()
    raise ValueError(f"unknown function {op!r}")


def where(mask: np.ndarray, a: JetVector, b: JetVector) -> JetVector:
    """Element-wise select; ``a`` where ``mask`` else ``b``."""
    return JetVector(np.where(mask, a.values, b.values), np.where(mask, a.grads, b.grads))


Vec3 = Sequence[JetVector]


def cross(a: Vec3, b: Vec3) -> list[JetVector]:
    return [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]


def dot(a: Vec3, b: Vec3) -> JetVector:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def rotate_angle_axis(aa: Vec3, x: Vec3) -> list[JetVector]:
    """Rodrigues rotation ``R(aa) x`` built from jet operations."""
    theta2 = dot(aa, aa)
    small = theta2.values < SMALL_ANGLE_SQ
    one = JetVector.constant(np.ones(theta2.n), theta2.d, theta2.dtype)
    theta = where(small, one, theta2).sqrt()
    c = theta.cos()
    s = theta.sin()
    k = [w / theta for w in aa]
    kx = cross(k, x)
    kdx = dot(k, x)
    big = [x[i] * c + kx[i] * s + k[i] * kdx * (1.0 - c) for i in range(3)]

    wx = cross(aa, x)
    wwx = cross(aa, wx)
    tiny = [x[i] + wx[i] + wwx[i] * 0.5 for i in range(3)]
    if not small.any():
        return big
    return [where(small, tiny[i], big[i]) for i in range(3)]


def project(cam: Sequence[JetVector], X: Vec3, pixels: np.ndarray, edge_ids=None) -> tuple[JetVector, JetVector]:
    """BAL reprojection residual with jet-valued camera and point parameters."""
    P = rotate_angle_axis(cam[0:3], X)
    P = [P[i] + cam[3 + i] for i in range(3)]
    _raise_on_degenerate(P[2].values, np.arange(P[2].n) if edge_ids is None else edge_ids)
    px = -P[0] / P[2]
    py = -P[1] / P[2]
    r2 = px * px + py * py
    distortion = 1.0 + r2 * (cam[7] + cam[8] * r2)
    scale = cam[6] * distortion
    return scale * px - pixels[:, 0], scale * py - pixels[:, 1]


@dataclass
class EdgeJacobianBatch:
    """Residuals and local Jacobian blocks for a contiguous batch of edges."""

    edge_ids: np.ndarray
    residuals: np.ndarray   # (ne, 2)
    J_cam: np.ndarray       # (ne, 2, 9)
    J_pt: np.ndarray        # (ne, 2, 3)
    weights: np.ndarray     # (ne,)

    @property
    def num_edges(self) -> int:
        return len(self.edge_ids)

    def cost_terms(self) -> np.ndarray:
        r = self.residuals
        return self.weights * (r[:, 0] * r[:, 0] + r[:, 1] * r[:, 1])

    def cost(self) -> float:
        return float(exact_sum(self.cost_terms()))


def _seed(cams: np.ndarray, pts: np.ndarray, d: int, dtype):
    cam = [JetVector.variable(cams[:, i], i, d, dtype) for i in range(CAMERA_DIM)]
    X = [JetVector.variable(pts[:, i], CAMERA_DIM + i, d, dtype) for i in range(POINT_DIM)]
    return cam, X


def _raise_on_degenerate(depth: np.ndarray, edge_ids: np.ndarray) -> None:
    zero = np.flatnonzero(depth == 0)
    if len(zero):
        e = int(edge_ids[zero[0]])
        raise DegenerateDepthError(f"edge {e} projects with zero depth", e)


def _gather(problem: BAProblem, edge_ids, cameras, points, dtype):
    cams = np.asarray(cameras, dtype=dtype)[problem.camera_index[edge_ids]]
    pts = np.asarray(points, dtype=dtype)[problem.point_index[edge_ids]]
    pixels = problem.pixels[edge_ids].astype(dtype)
    return cams, pts, pixels


class EdgeEvaluator:
    """Per-worker batched residual/Jacobian evaluation with reusable outputs.

    Output buffers are sized on the first call and refilled afterwards, so
    repeated LM iterations do not reallocate the batch.
    """

    def __init__(self, problem: BAProblem, partition: EdgePartition, dtype=np.float64, mode: str = "auto"):
        if mode not in ("auto", "analytic"):
            raise ValueError(f"unknown jacobian mode {mode!r}")
        self.problem = problem
        self.partition = partition
        self.dtype = np.dtype(dtype)
        self.mode = mode
        self._batch: EdgeJacobianBatch | None = None
        self.edges_evaluated = 0

    def _buffers(self) -> EdgeJacobianBatch:
        if self._batch is None:
            ne = self.partition.num_edges
            ids = self.partition.edge_ids
            self._batch = EdgeJacobianBatch(
                ids,
                np.empty((ne, 2), self.dtype),
                np.empty((ne, 2, CAMERA_DIM), self.dtype),
                np.empty((ne, 2, POINT_DIM), self.dtype),
                self.problem.weights[ids].astype(self.dtype),
            )
        return self._batch

    def evaluate(self, cameras: np.ndarray, points: np.ndarray) -> EdgeJacobianBatch:
        ids = self.partition.edge_ids
        cams, pts, pixels = _gather(self.problem, ids, cameras, points, self.dtype)
        out = self._buffers()
        if self.mode == "analytic":
            res, jc, jp = analytic_edge_jacobians(cams, pts, pixels, ids)
            out.residuals[:] = res
            out.J_cam[:] = jc
            out.J_pt[:] = jp
        else:
            cam, X = _seed(cams, pts, LOCAL_DIM, self.dtype)
            rx, ry = project(cam, X, pixels, ids)
            out.residuals[:, 0] = rx.values
            out.residuals[:, 1] = ry.values
            out.J_cam[:, 0, :] = rx.grads[:CAMERA_DIM].T
            out.J_cam[:, 1, :] = ry.grads[:CAMERA_DIM].T
            out.J_pt[:, 0, :] = rx.grads[CAMERA_DIM:].T
            out.J_pt[:, 1, :] = ry.grads[CAMERA_DIM:].T
        self.edges_evaluated += len(ids)
        return out

    def residuals(self, cameras: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Residual values only (zero gradient lanes), same arithmetic as :meth:`evaluate`."""
        ids = self.partition.edge_ids
        cams, pts, pixels = _gather(self.problem, ids, cameras, points, self.dtype)
        cam, X = _seed(cams, pts, 0, self.dtype)
        rx, ry = project(cam, X, pixels, ids)
        self.edges_evaluated += len(ids)
        return np.stack([rx.values, ry.values], axis=1)

    def cost_terms(self, cameras: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Per-edge weighted squared residual norms."""
        r = self.residuals(cameras, points)
        w = self._buffers().weights
        return w * (r[:, 0] * r[:, 0] + r[:, 1] * r[:, 1])

    def cost(self, cameras: np.ndarray, points: np.ndarray) -> float:
        return float(exact_sum(self.cost_terms(cameras, points)))


def evaluate_edges(problem: BAProblem, partition: EdgePartition, cameras: np.ndarray, points: np.ndarray,
                   dtype=np.float64, mode: str = "auto") -> EdgeJacobianBatch:
    return EdgeEvaluator(problem, partition, dtype, mode).evaluate(cameras, points)


# -- hand-coded Jacobians -----------------------------------------------------


def _skew(v: np.ndarray) -> np.ndarray:
    z = np.zeros_like(v[:, 0])
    return np.stack([
        np.stack([z, -v[:, 2], v[:, 1]], axis=-1),
        np.stack([v[:, 2], z, -v[:, 0]], axis=-1),
        np.stack([-v[:, 1], v[:, 0], z], axis=-1),
    ], axis=1)


def _rotation_matrices(w: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ij,ij->i", w, w)
    small = theta2 < SMALL_ANGLE_SQ
    theta = np.sqrt(np.where(small, 1.0, theta2))
    W = _skew(w)
    W2 = W @ W
    a = np.where(small, 1.0, np.sin(theta) / theta)
    b = np.where(small, 0.5, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    eye = np.broadcast_to(np.eye(3, dtype=w.dtype), W.shape)
    return eye + a[:, None, None] * W + b[:, None, None] * W2


def _right_jacobian(w: np.ndarray) -> np.ndarray:
    theta2 = np.einsum("ij,ij->i", w, w)
    small = theta2 < SMALL_ANGLE_SQ
    safe2 = np.where(small, 1.0, theta2)
    theta = np.sqrt(safe2)
    W = _skew(w)
    a = np.where(small, 0.5, (1.0 - np.cos(theta)) / safe2)
    b = np.where(small, 1.0 / 6.0, (theta - np.sin(theta)) / (safe2 * theta))
    eye = np.broadcast_to(np.eye(3, dtype=w.dtype), W.shape)
    return eye - a[:, None, None] * W + b[:, None, None] * (W @ W)


def analytic_edge_jacobians(cams: np.ndarray, pts: np.ndarray, pixels: np.ndarray, edge_ids=None):
    """Closed-form residuals and Jacobian blocks, independent of the jet path.

    Uses ``d(R(w) X)/dw = -R [X]_x J_r(w)`` with the SO(3) right Jacobian.
    """
    if edge_ids is None:
        edge_ids = np.arange(len(cams))
    w = cams[:, 0:3]
    R = _rotation_matrices(w)
    P = np.einsum("eij,ej->ei", R, pts) + cams[:, 3:6]
    _raise_on_degenerate(P[:, 2], edge_ids)
    inv_z = 1.0 / P[:, 2]
    p = -P[:, :2] * inv_z[:, None]
    r2 = np.einsum("ij,ij->i", p, p)
    f, k1, k2 = cams[:, 6], cams[:, 7], cams[:, 8]
    d = 1.0 + r2 * (k1 + k2 * r2)
    res = (f * d)[:, None] * p - pixels

    # dp/dP
    ne = len(cams)
    dp_dP = np.zeros((ne, 2, 3), dtype=cams.dtype)
    dp_dP[:, 0, 0] = -inv_z
    dp_dP[:, 1, 1] = -inv_z
    dp_dP[:, 0, 2] = P[:, 0] * inv_z * inv_z
    dp_dP[:, 1, 2] = P[:, 1] * inv_z * inv_z
    # dr/dp = f (d I + p (dd/dp)^T), dd/dp = (2 k1 + 4 k2 r2) p
    dd = (2.0 * k1 + 4.0 * k2 * r2)[:, None] * p
    dr_dp = f[:, None, None] * (d[:, None, None] * np.eye(2, dtype=cams.dtype) + p[:, :, None] * dd[:, None, :])
    dr_dP = dr_dp @ dp_dP

    dP_dw = -R @ _skew(pts) @ _right_jacobian(w)
    J_cam = np.empty((ne, 2, CAMERA_DIM), dtype=cams.dtype)
    J_cam[:, :, 0:3] = dr_dP @ dP_dw
    J_cam[:, :, 3:6] = dr_dP
    J_cam[:, :, 6] = d[:, None] * p
    J_cam[:, :, 7] = (f * r2)[:, None] * p
    J_cam[:, :, 8] = (f * r2 * r2)[:, None] * p
    J_pt = dr_dP @ R
    return res, J_cam, J_pt
