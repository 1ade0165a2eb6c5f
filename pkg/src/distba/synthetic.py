"""Synthetic ring-of-cameras BA problems.

Cameras sit uniformly on a circle of radius 8 in the z=0 plane, looking at
a thin cluster of points around the origin. At full scale the recipe is
20000 cameras, 80000 points and 1000 observations per point.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterator

import numpy as np
from scipy.spatial.transform import Rotation

from .problem import BAProblem, project

FULL_SCALE = (20_000, 80_000, 1_000)


@dataclass(frozen=True)
class SyntheticConfig:
    num_cameras: int = 20
    num_points: int = 80
    obs_per_point: int = 10
    seed: int = 0
    radius: float = 8.0
    focal: float = 500.0
    rotation_noise: float = 0.01
    translation_noise: float = 0.01
    intrinsic_noise: float = 0.5
    point_xy_extent: float = 0.1
    point_xy_noise: float = 0.1
    point_z_extent: float = 0.03
    pixel_noise: float = 0.0

    def __post_init__(self):
        if min(self.num_cameras, self.num_points, self.obs_per_point) < 1:
            raise ValueError("camera, point and per-point observation counts must be positive")
        if self.obs_per_point > self.num_cameras:
            raise ValueError(
                f"obs_per_point ({self.obs_per_point}) exceeds number of cameras ({self.num_cameras})"
            )

    @classmethod
    def scaled(cls, factor: float, **overrides) -> "SyntheticConfig":
        """Full-scale recipe with every count multiplied by ``factor``."""
        m, n, q = (max(1, int(round(v * factor))) for v in FULL_SCALE)
        params = dict(num_cameras=m, num_points=n, obs_per_point=min(q, m))
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)

    @property
    def num_observations(self) -> int:
        return self.num_points * self.obs_per_point

    def header(self) -> str:
        return f"{self.num_cameras} {self.num_points} {self.num_observations}"


@dataclass
class Scene:
    true_cameras: np.ndarray
    noisy_cameras: np.ndarray
    true_points: np.ndarray
    noisy_points: np.ndarray


def _ring_cameras(cfg: SyntheticConfig) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(cfg.num_cameras) / cfg.num_cameras
    centers = cfg.radius * np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
    # Rows of R: tangent, up, outward. The camera looks along -z (towards the origin).
    back = centers / cfg.radius
    right = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=1)
    up = np.cross(back, right)
    R = np.stack([right, up, back], axis=1)
    t = -np.einsum("eij,ej->ei", R, centers)
    cams = np.zeros((cfg.num_cameras, 9))
    cams[:, 0:3] = Rotation.from_matrix(R).as_rotvec()
    cams[:, 3:6] = t
    cams[:, 6] = cfg.focal
    return cams


def make_scene(cfg: SyntheticConfig, rng: np.random.Generator) -> Scene:
    true_cams = _ring_cameras(cfg)
    noisy = true_cams.copy()
    noisy[:, 0:3] += rng.uniform(0.0, cfg.rotation_noise, size=(cfg.num_cameras, 3))
    noisy[:, 3:6] += rng.uniform(0.0, cfg.translation_noise, size=(cfg.num_cameras, 3))
    noisy[:, 6] += rng.uniform(0.0, cfg.intrinsic_noise, size=cfg.num_cameras)

    pts = np.empty((cfg.num_points, 3))
    pts[:, 0:2] = rng.uniform(-cfg.point_xy_extent, cfg.point_xy_extent, size=(cfg.num_points, 2))
    pts[:, 2] = rng.uniform(-cfg.point_z_extent, cfg.point_z_extent, size=cfg.num_points)
    noisy_pts = pts.copy()
    noisy_pts[:, 0:2] += rng.uniform(-cfg.point_xy_noise, cfg.point_xy_noise, size=(cfg.num_points, 2))
    return Scene(true_cams, noisy, pts, noisy_pts)


def _nearest_cameras(cfg: SyntheticConfig, points: np.ndarray) -> np.ndarray:
    phi = 2.0 * np.pi * np.arange(cfg.num_cameras) / cfg.num_cameras
    centers = cfg.radius * np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    q = cfg.obs_per_point
    if q < cfg.num_cameras:
        nearest = np.argpartition(d2, q - 1, axis=1)[:, :q]
    else:
        nearest = np.tile(np.arange(cfg.num_cameras), (len(points), 1))
    # Deterministic per-point order: ascending camera index.
    return np.sort(nearest, axis=1)


def observation_chunks(cfg: SyntheticConfig, scene: Scene, rng: np.random.Generator,
                       chunk_points: int = 4096) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Point-major observation blocks ``(camera_ids, point_ids, pixels)``.

    Pixels are projections of the ground-truth points through the perturbed
    cameras, plus optional Gaussian pixel noise.
    """
    q = cfg.obs_per_point
    for start in range(0, cfg.num_points, chunk_points):
        stop = min(cfg.num_points, start + chunk_points)
        cams = _nearest_cameras(cfg, scene.true_points[start:stop]).ravel()
        pts = np.repeat(np.arange(start, stop), q)
        pixels = project(scene.noisy_cameras[cams], scene.true_points[pts])
        if cfg.pixel_noise > 0:
            pixels = pixels + rng.normal(0.0, cfg.pixel_noise, size=pixels.shape)
        yield cams, pts, pixels


def generate(cfg: SyntheticConfig) -> BAProblem:
    """Build the synthetic problem in memory.

    The initial state holds the unperturbed camera ring and the perturbed
    points, so neither the initial nor the ground-truth state has zero
    residual.
    """
    rng = np.random.default_rng(cfg.seed)
    scene = make_scene(cfg, rng)
    chunks = list(observation_chunks(cfg, scene, rng))
    cams = np.concatenate([c[0] for c in chunks])
    pts = np.concatenate([c[1] for c in chunks])
    pixels = np.concatenate([c[2] for c in chunks])
    return BAProblem.from_arrays(scene.true_cameras, scene.noisy_points, cams, pts, pixels)


def write_synthetic(cfg: SyntheticConfig, stream: IO[str]) -> None:
    """Stream the synthetic problem as a BAL file without holding all edges in memory."""
    rng = np.random.default_rng(cfg.seed)
    scene = make_scene(cfg, rng)
    stream.write(cfg.header() + "\n")
    for cams, pts, pixels in observation_chunks(cfg, scene, rng):
        stream.writelines(
            f"{c} {p} {x:.17g} {y:.17g}\n"
            for c, p, x, y in zip(cams.tolist(), pts.tolist(), pixels[:, 0].tolist(), pixels[:, 1].tolist())
        )
    stream.writelines(f"{v:.17g}\n" for v in scene.true_cameras.ravel().tolist())
    stream.writelines(f"{v:.17g}\n" for v in scene.noisy_points.ravel().tolist())
