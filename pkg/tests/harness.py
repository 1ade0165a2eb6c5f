"""Shared helpers: dense oracles and a K-rank driver for the reduced camera system."""
from dataclasses import dataclass

import mpmath
import numpy as np

from distba.comms import WorkerGroup, run_workers
from distba.jet import EdgeEvaluator, evaluate_edges
from distba.linear import FactoredBlockDiag, HessianAssembler, apply_lm_damping
from distba.partition import partition_edges
from distba.solver import allreduce_E, reduce_hessian


def dense_jacobian(prob):
    part = partition_edges(prob, 1)[0]
    b = evaluate_edges(prob, part, prob.cameras, prob.points)
    m, n, N = prob.num_cameras, prob.num_points, prob.num_observations
    J = np.zeros((2 * N, 9 * m + 3 * n))
    for e in range(N):
        c, p = prob.camera_index[e], prob.point_index[e]
        J[2 * e:2 * e + 2, 9 * c:9 * c + 9] = b.J_cam[e]
        J[2 * e:2 * e + 2, 9 * m + 3 * p:9 * m + 3 * p + 3] = b.J_pt[e]
    return J, b.residuals.ravel()


def _mp_residual(q, pixel):
    """Reprojection residual of a 12-vector (camera, point) in mpmath arithmetic."""
    w, X = q[0:3], q[9:12]
    theta = mpmath.sqrt(w[0] ** 2 + w[1] ** 2 + w[2] ** 2)
    if theta == 0:
        P = [X[i] + q[3 + i] for i in range(3)]
    else:
        k = [wi / theta for wi in w]
        c, s = mpmath.cos(theta), mpmath.sin(theta)
        kx = [k[1] * X[2] - k[2] * X[1], k[2] * X[0] - k[0] * X[2], k[0] * X[1] - k[1] * X[0]]
        kd = k[0] * X[0] + k[1] * X[1] + k[2] * X[2]
        P = [X[i] * c + kx[i] * s + k[i] * kd * (1 - c) + q[3 + i] for i in range(3)]
    p = [-P[0] / P[2], -P[1] / P[2]]
    r2 = p[0] ** 2 + p[1] ** 2
    d = 1 + q[7] * r2 + q[8] * r2 ** 2
    return [q[6] * d * p[i] - pixel[i] for i in range(2)]


def fd_jacobian_mp(cam, X, pixel, digits=60):
    """Central differences of the residual at 60 significant digits (2x12, rounded to float64).

    A float64 difference quotient cannot resolve the k2 column, whose entries can sit
    more than ten orders below the residual itself. With h ~ 1e-30 the rounding noise
    is ~1e-30 |r| and the truncation error ~1e-60.
    """
    with mpmath.workdps(digits):
        q = [mpmath.mpf(float(v)) for v in np.concatenate([cam, X])]
        pix = [mpmath.mpf(float(v)) for v in pixel]
        out = np.zeros((2, 12))
        for j in range(12):
            h = mpmath.mpf(10) ** (-(digits // 2)) * max(1, abs(q[j]))
            hi, lo = list(q), list(q)
            hi[j] += h
            lo[j] -= h
            a, b = _mp_residual(hi, pix), _mp_residual(lo, pix)
            out[:, j] = [float((a[i] - b[i]) / (2 * h)) for i in range(2)]
    return out


def column_errors(J, fd):
    """Per-column max error relative to that column's largest entry (all-zero columns compare absolutely)."""
    scale = np.max(np.abs(fd), axis=0)
    err = np.max(np.abs(J - fd), axis=0)
    return np.where(scale > 0, err / np.where(scale > 0, scale, 1.0), err)


@dataclass
class DenseSystem:
    S: np.ndarray        # B - E C^-1 E^T (damped)
    rhs: np.ndarray      # v - E C^-1 w
    B: np.ndarray
    C: np.ndarray
    E: np.ndarray


def dense_reduced_system(prob, lam):
    """Dense construction of the damped reduced camera system, straight from J."""
    J, r = dense_jacobian(prob)
    m9 = 9 * prob.num_cameras
    H = J.T @ J + lam * np.eye(J.shape[1])
    g = -J.T @ r
    B, C, E = H[:m9, :m9], H[m9:, m9:], H[:m9, m9:]
    Cinv = np.linalg.inv(C)
    return DenseSystem(B - E @ Cinv @ E.T, g[:m9] - E @ Cinv @ g[m9:], B, C, E)


@dataclass
class RankContext:
    group: WorkerGroup
    rank: int
    B: object            # damped BlockDiag
    B_inv: FactoredBlockDiag
    C_inv: FactoredBlockDiag
    E_k: object
    g: np.ndarray


def run_distributed(prob, K, fn, lam=1e-2):
    """Build the damped reduced system on K ranks and call ``fn(ctx)`` on each."""
    parts = partition_edges(prob, K)

    def worker(group, rank):
        part = parts[rank]
        ev = EdgeEvaluator(prob, part)
        asm = HessianAssembler(part, prob.camera_index, prob.point_index, prob.num_cameras, prob.num_points)
        batch = ev.evaluate(prob.cameras, prob.points)
        B, C, v, w = reduce_hessian(asm, batch, group, rank, prob.num_observations)
        Bd, Cd = apply_lm_damping(B, C, lam)
        C_inv = FactoredBlockDiag(Cd)
        E_k = asm.hessian.E
        g = v - allreduce_E(E_k, C_inv.solve(w), group, rank)
        return fn(RankContext(group, rank, Bd, FactoredBlockDiag(Bd), C_inv, E_k, g))

    return run_workers(K, worker, timeout=60)
