"""Bundle adjustment problem model, BAL file I/O and the scalar residual oracle.

Cameras follow the 9-parameter BAL convention
``[rx, ry, rz, tx, ty, tz, focal, k1, k2]`` and project a world point ``X`` as::

    P = R(r) X + t
    p = -(P_x, P_y) / P_z
    residual = focal * (1 + k1 |p|^2 + k2 |p|^4) * p - pixel
"""
from __future__ import annotations

import bz2
import gzip
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Union

import numpy as np

from .exactsum import exact_sum

CAMERA_DIM = 9
POINT_DIM = 3

# Below this squared angle Rodrigues switches to its Taylor expansion.
SMALL_ANGLE_SQ = 1e-12


class BALFormatError(ValueError):
    """Malformed BAL input. ``line`` is 1-based, or None at end of stream."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class DegenerateDepthError(ArithmeticError):
    """A point lands on the camera plane (zero depth)."""

    def __init__(self, message: str, edge: int | None = None):
        self.edge = edge
        super().__init__(message)


@dataclass(frozen=True)
class CameraState:
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focal: float = 1.0
    k1: float = 0.0
    k2: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([*self.rotation, *self.translation, self.focal, self.k1, self.k2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "CameraState":
        a = [float(v) for v in a]
        return cls(tuple(a[0:3]), tuple(a[3:6]), a[6], a[7], a[8])


@dataclass(frozen=True)
class PointState:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_array(self) -> np.ndarray:
        return np.array(self.position, dtype=float)


@dataclass(frozen=True)
class Observation:
    camera_id: int
    point_id: int
    pixel: tuple[float, float]
    weight: float = 1.0


class _Growable:
    """Append-only row buffer with amortised doubling."""

    def __init__(self, width: int | None, dtype):
        self._width = width
        shape = (16,) if width is None else (16, width)
        self._buf = np.zeros(shape, dtype=dtype)
        self._size = 0

    def append(self, row) -> int:
        if self._size == len(self._buf):
            grown = np.zeros((max(16, 2 * len(self._buf)),) + self._buf.shape[1:], dtype=self._buf.dtype)
            grown[: self._size] = self._buf
            self._buf = grown
        self._buf[self._size] = row
        self._size += 1
        return self._size - 1

    def set(self, arr: np.ndarray) -> None:
        self._buf = np.array(arr, dtype=self._buf.dtype, copy=True)
        self._size = len(self._buf)

    @property
    def view(self) -> np.ndarray:
        return self._buf[: self._size]

    def __len__(self) -> int:
        return self._size


class BAProblem:
    """Cameras, points and observation edges of one BA graph.

    Parameter storage is columnar (``cameras`` is ``(m, 9)``, ``points`` is
    ``(n, 3)``); the observation order is the canonical edge order.
    """

    def __init__(self):
        self._cameras = _Growable(CAMERA_DIM, np.float64)
        self._points = _Growable(POINT_DIM, np.float64)
        self._cam_idx = _Growable(None, np.int64)
        self._pt_idx = _Growable(None, np.int64)
        self._pixels = _Growable(2, np.float64)
        self._weights = _Growable(None, np.float64)

    @classmethod
    def from_arrays(cls, cameras, points, camera_index, point_index, pixels, weights=None) -> "BAProblem":
        cameras = np.asarray(cameras, dtype=np.float64).reshape(-1, CAMERA_DIM)
        points = np.asarray(points, dtype=np.float64).reshape(-1, POINT_DIM)
        camera_index = np.asarray(camera_index, dtype=np.int64).ravel()
        point_index = np.asarray(point_index, dtype=np.int64).ravel()
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if weights is None:
            weights = np.ones(len(camera_index))
        weights = np.asarray(weights, dtype=np.float64).ravel()
        n_obs = len(camera_index)
        if not (len(point_index) == len(pixels) == len(weights) == n_obs):
            raise ValueError("observation arrays have inconsistent lengths")
        if not (np.all(np.isfinite(cameras)) and np.all(np.isfinite(points))):
            raise ValueError("non-finite camera or point parameter")
        if n_obs and (camera_index.min() < 0 or camera_index.max() >= len(cameras)):
            raise IndexError("camera index out of range")
        if n_obs and (point_index.min() < 0 or point_index.max() >= len(points)):
            raise IndexError("point index out of range")
        if np.any(weights < 0):
            raise ValueError("observation weights must be non-negative")
        prob = cls()
        prob._cameras.set(cameras)
        prob._points.set(points)
        prob._cam_idx.set(camera_index)
        prob._pt_idx.set(point_index)
        prob._pixels.set(pixels)
        prob._weights.set(weights)
        return prob

    # -- graph construction ------------------------------------------------

    def add_node(self, node: Union[CameraState, PointState]) -> int:
        arr = node.to_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite component in {type(node).__name__}: {arr}")
        if isinstance(node, CameraState):
            return self._cameras.append(arr)
        if isinstance(node, PointState):
            return self._points.append(arr)
        raise TypeError(f"unsupported node type {type(node).__name__}")

    def add_edge(self, obs: Observation) -> int:
        if not 0 <= obs.camera_id < self.num_cameras:
            raise IndexError(f"edge references unregistered camera {obs.camera_id}")
        if not 0 <= obs.point_id < self.num_points:
            raise IndexError(f"edge references unregistered point {obs.point_id}")
        if not obs.weight >= 0:
            raise ValueError(f"edge weight must be >= 0, got {obs.weight}")
        pixel = np.asarray(obs.pixel, dtype=float)
        if pixel.shape != (2,) or not np.all(np.isfinite(pixel)):
            raise ValueError(f"bad pixel {obs.pixel!r}")
        self._cam_idx.append(obs.camera_id)
        self._pt_idx.append(obs.point_id)
        self._pixels.append(pixel)
        return self._weights.append(obs.weight)

    # -- accessors ----------------------------------------------------------

    @property
    def num_cameras(self) -> int:
        return len(self._cameras)

    @property
    def num_points(self) -> int:
        return len(self._points)

    @property
    def num_observations(self) -> int:
        return len(self._cam_idx)

    @property
    def cameras(self) -> np.ndarray:
        return self._cameras.view

    @property
    def points(self) -> np.ndarray:
        return self._points.view

    @property
    def camera_index(self) -> np.ndarray:
        return self._cam_idx.view

    @property
    def point_index(self) -> np.ndarray:
        return self._pt_idx.view

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels.view

    @property
    def weights(self) -> np.ndarray:
        return self._weights.view

    def camera(self, i: int) -> CameraState:
        return CameraState.from_array(self.cameras[i])

    def point(self, j: int) -> PointState:
        return PointState(tuple(float(v) for v in self.points[j]))

    def observation(self, e: int) -> Observation:
        return Observation(
            int(self.camera_index[e]),
            int(self.point_index[e]),
            (float(self.pixels[e, 0]), float(self.pixels[e, 1])),
            float(self.weights[e]),
        )

    def with_parameters(self, cameras: np.ndarray, points: np.ndarray) -> "BAProblem":
        """Copy of this problem with replaced camera/point parameters."""
        return BAProblem.from_arrays(
            cameras, points, self.camera_index, self.point_index, self.pixels, self.weights
        )

    def validate(self) -> list[str]:
        """Return (and emit as warnings) soft consistency problems."""
        issues = []
        if self.num_observations:
            cam_seen = np.bincount(self.camera_index, minlength=self.num_cameras)
            pt_seen = np.bincount(self.point_index, minlength=self.num_points)
        else:
            cam_seen = np.zeros(self.num_cameras, dtype=int)
            pt_seen = np.zeros(self.num_points, dtype=int)
        for i in np.flatnonzero(cam_seen == 0):
            issues.append(f"camera {i} has no observations")
        for j in np.flatnonzero(pt_seen == 0):
            issues.append(f"point {j} has no observations")
        for i in np.flatnonzero(self.cameras[:, 6] <= 0):
            issues.append(f"camera {i} has non-positive focal length {self.cameras[i, 6]}")
        for msg in issues:
            warnings.warn(msg, stacklevel=2)
        return issues


def add_node(problem: BAProblem, node: Union[CameraState, PointState]) -> int:
    return problem.add_node(node)


def add_edge(problem: BAProblem, obs: Observation) -> int:
    return problem.add_edge(obs)


# -- BAL I/O ----------------------------------------------------------------


def _tokenize(stream: IO[str]):
    tokens: list[str] = []
    lines: list[int] = []
    for lineno, line in enumerate(stream, 1):
        parts = line.split()
        tokens.extend(parts)
        lines.extend([lineno] * len(parts))
    return tokens, lines


def _convert(tokens, lines, start, stop, kind, what):
    chunk = tokens[start:stop]
    try:
        return np.array(chunk, dtype=kind)
    except ValueError:
        for off, tok in enumerate(chunk):
            try:
                kind(tok)
            except ValueError:
                raise BALFormatError(f"non-numeric token {tok!r} in {what}", lines[start + off]) from None
        raise


def parse_bal(stream: IO[str], dtype=np.float64) -> BAProblem:
    """Read a BAL problem from a text stream.

    Values are rounded through ``dtype`` (float32 or float64) before being
    stored.
    """
    tokens, lines = _tokenize(stream)
    if len(tokens) < 3:
        raise BALFormatError("truncated header: expected 'num_cameras num_points num_observations'",
                             lines[-1] if lines else None)
    try:
        m, n, n_obs = (int(t) for t in tokens[:3])
    except ValueError:
        raise BALFormatError(f"non-integer header {tokens[:3]}", lines[0]) from None
    if min(m, n, n_obs) < 0:
        raise BALFormatError("negative count in header", lines[0])

    expected = 3 + 4 * n_obs + CAMERA_DIM * m + POINT_DIM * n
    if len(tokens) < expected:
        last = lines[-1] if lines else None
        raise BALFormatError(
            f"truncated stream: expected {expected} values, found {len(tokens)}", last
        )
    if len(tokens) > expected:
        warnings.warn(f"ignoring {len(tokens) - expected} trailing tokens after line {lines[expected - 1]}")

    pos = 3
    obs_tokens = tokens[pos: pos + 4 * n_obs]
    obs_lines = lines[pos: pos + 4 * n_obs]
    cam_tok = obs_tokens[0::4]
    pt_tok = obs_tokens[1::4]
    px_tok = obs_tokens[2::4] + obs_tokens[3::4]
    line_of_obs = obs_lines[0::4]

    def _indices(toks, label, bound):
        try:
            arr = np.array([int(t) for t in toks], dtype=np.int64)
        except ValueError:
            for k, t in enumerate(toks):
                try:
                    int(t)
                except ValueError:
                    raise BALFormatError(f"non-integer {label} index {t!r}", line_of_obs[k]) from None
            raise
        bad = np.flatnonzero((arr < 0) | (arr >= bound))
        if len(bad):
            k = int(bad[0])
            raise BALFormatError(
                f"{label} index {arr[k]} out of range [0, {bound})", line_of_obs[k]
            )
        return arr

    cam_idx = _indices(cam_tok, "camera", m)
    pt_idx = _indices(pt_tok, "point", n)
    try:
        xy = np.array(px_tok, dtype=np.float64)
    except ValueError:
        for k in range(n_obs):
            for tok in (obs_tokens[4 * k + 2], obs_tokens[4 * k + 3]):
                try:
                    float(tok)
                except ValueError:
                    raise BALFormatError(f"non-numeric pixel token {tok!r}", line_of_obs[k]) from None
        raise
    pixels = np.stack([xy[:n_obs], xy[n_obs:]], axis=1) if n_obs else np.zeros((0, 2))
    pos += 4 * n_obs

    cameras = _convert(tokens, lines, pos, pos + CAMERA_DIM * m, float, "camera block")
    pos += CAMERA_DIM * m
    points = _convert(tokens, lines, pos, pos + POINT_DIM * n, float, "point block")

    cameras = cameras.astype(dtype).astype(np.float64).reshape(m, CAMERA_DIM)
    points = points.astype(dtype).astype(np.float64).reshape(n, POINT_DIM)
    pixels = pixels.astype(dtype).astype(np.float64)
    if not (np.all(np.isfinite(cameras)) and np.all(np.isfinite(points)) and np.all(np.isfinite(pixels))):
        raise BALFormatError("non-finite value in file")
    for i in np.flatnonzero(cameras[:, 6] <= 0):
        warnings.warn(f"camera {i} has non-positive focal length {cameras[i, 6]}")
    return BAProblem.from_arrays(cameras, points, cam_idx, pt_idx, pixels)


def open_text(path: Union[str, Path]) -> IO[str]:
    """Open a BAL file, transparently decompressing ``.bz2``/``.gz``."""
    path = Path(path)
    if path.suffix == ".bz2":
        return io.TextIOWrapper(bz2.open(path, "rb"), encoding="ascii")
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="ascii")
    return open(path, "r", encoding="ascii")


def load_bal(path: Union[str, Path], dtype=np.float64) -> BAProblem:
    with open_text(path) as fh:
        return parse_bal(fh, dtype=dtype)


def write_bal(problem: BAProblem, stream: IO[str]) -> None:
    """Serialize in BAL layout with 17 significant digits (exact round trip)."""
    stream.write(f"{problem.num_cameras} {problem.num_points} {problem.num_observations}\n")
    ci, pi, px = problem.camera_index, problem.point_index, problem.pixels
    stream.writelines(
        f"{c} {p} {x:.17g} {y:.17g}\n" for c, p, x, y in zip(ci.tolist(), pi.tolist(), px[:, 0].tolist(), px[:, 1].tolist())
    )
    stream.writelines(f"{v:.17g}\n" for v in problem.cameras.ravel().tolist())
    stream.writelines(f"{v:.17g}\n" for v in problem.points.ravel().tolist())


# -- residual oracle --------------------------------------------------------


def _as_real(a) -> np.ndarray:
    """Float array, keeping extended precision when the input carries it."""
    a = np.asarray(a)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def rotate(angle_axis, x) -> np.ndarray:
    """Rodrigues rotation of ``x`` by an angle-axis vector (plain numpy)."""
    w = _as_real(angle_axis)
    x = _as_real(x)
    theta2 = float(w @ w)
    if theta2 < SMALL_ANGLE_SQ:
        wx = np.cross(w, x)
        return x + wx + 0.5 * np.cross(w, wx)
    theta = np.sqrt(theta2)
    k = w / theta
    c, s = np.cos(theta), np.sin(theta)
    return x * c + np.cross(k, x) * s + k * (k @ x) * (1.0 - c)


def residual(camera: Union[CameraState, np.ndarray], point: Union[PointState, np.ndarray], pixel) -> np.ndarray:
    cam = camera.to_array() if isinstance(camera, CameraState) else _as_real(camera)
    X = point.to_array() if isinstance(point, PointState) else _as_real(point)
    P = rotate(cam[0:3], X) + cam[3:6]
    if P[2] == 0.0:
        raise DegenerateDepthError("point projects with zero depth")
    p = -P[:2] / P[2]
    r2 = p @ p
    d = 1.0 + cam[7] * r2 + cam[8] * r2 * r2
    return cam[6] * d * p - _as_real(pixel)


def project(cam: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Predicted pixels for per-edge camera rows ``(N, 9)`` and points ``(N, 3)``."""
    w = cam[:, 0:3]
    theta2 = np.einsum("ij,ij->i", w, w)
    small = theta2 < SMALL_ANGLE_SQ
    theta = np.sqrt(np.where(small, 1.0, theta2))
    k = w / theta[:, None]
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    big = X * c + np.cross(k, X) * s + k * np.einsum("ij,ij->i", k, X)[:, None] * (1.0 - c)
    wx = np.cross(w, X)
    tiny = X + wx + 0.5 * np.cross(w, wx)
    P = np.where(small[:, None], tiny, big) + cam[:, 3:6]
    zero = np.flatnonzero(P[:, 2] == 0.0)
    if len(zero):
        raise DegenerateDepthError(f"edge {zero[0]} projects with zero depth", int(zero[0]))
    p = -P[:, :2] / P[:, 2:3]
    r2 = np.einsum("ij,ij->i", p, p)
    d = 1.0 + cam[:, 7] * r2 + cam[:, 8] * r2 * r2
    return (cam[:, 6] * d)[:, None] * p


def residuals(problem: BAProblem, cameras: np.ndarray | None = None, points: np.ndarray | None = None) -> np.ndarray:
    """All edge residuals as an ``(N, 2)`` array, vectorised over edges."""
    cams = problem.cameras if cameras is None else cameras
    pts = problem.points if points is None else points
    return project(cams[problem.camera_index], pts[problem.point_index]) - problem.pixels


def total_cost(problem: BAProblem, cameras: np.ndarray | None = None, points: np.ndarray | None = None) -> float:
    """Weighted sum of squared residuals over all observations."""
    r = residuals(problem, cameras, points)
    return float(exact_sum(problem.weights * np.einsum("ij,ij->i", r, r)))


def mse(cost: float, num_observations: int, convention: str = "N") -> float:
    """Mean squared reprojection error. ``convention`` is ``"N"`` or ``"2N"``."""
    if num_observations == 0:
        return 0.0
    if convention == "N":
        return cost / num_observations
    if convention == "2N":
        return cost / (2 * num_observations)
    raise ValueError(f"unknown MSE convention {convention!r}")


def problem_mse(problem: BAProblem, convention: str = "N") -> float:
    return mse(total_cost(problem), problem.num_observations, convention)
