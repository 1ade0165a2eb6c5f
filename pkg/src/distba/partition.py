"""Edge-based partitioning of a BA problem across K workers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import BAProblem


@dataclass(frozen=True)
class LocalMap:
    """Global <-> local index translation for the nodes a worker touches.

    ``ids[local] == global``; ``local_of[global] == local`` or -1 if the
    node is not touched by this worker.
    """

    ids: np.ndarray
    local_of: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[int, int]:
        return {int(g): i for i, g in enumerate(self.ids)}


@dataclass(frozen=True)
class EdgePartition:
    worker_rank: int
    edge_ids: np.ndarray
    cameras: LocalMap
    points: LocalMap

    @property
    def num_edges(self) -> int:
        return len(self.edge_ids)

    @property
    def local_camera_map(self) -> dict[int, int]:
        return self.cameras.as_dict()

    @property
    def local_point_map(self) -> dict[int, int]:
        return self.points.as_dict()


def _first_appearance(ids: np.ndarray, size: int) -> LocalMap:
    uniq, first = np.unique(ids, return_index=True)
    ordered = uniq[np.argsort(first, kind="stable")]
    local_of = np.full(size, -1, dtype=np.int64)
    local_of[ordered] = np.arange(len(ordered))
    return LocalMap(ordered.astype(np.int64), local_of)


def build_local_maps(problem: BAProblem, edge_ids) -> tuple[LocalMap, LocalMap]:
    """Camera and point maps enumerating touched nodes in first-appearance order."""
    edge_ids = np.asarray(edge_ids, dtype=np.int64)
    cams = _first_appearance(problem.camera_index[edge_ids], problem.num_cameras)
    pts = _first_appearance(problem.point_index[edge_ids], problem.num_points)
    return cams, pts


def partition_sizes(num_edges: int, workers: int) -> list[int]:
    base, extra = divmod(num_edges, workers)
    return [base + 1 if k < extra else base for k in range(workers)]


def partition_edges(problem: BAProblem, workers: int, shuffle_seed: int | None = None) -> list[EdgePartition]:
    """Split the canonical edge order into ``workers`` contiguous chunks.

    The first ``N mod K`` ranks receive one extra edge. With
    ``shuffle_seed`` the edge order is permuted first (experiments only).
    """
    n_edges = problem.num_observations
    if workers < 1:
        raise ValueError(f"worker count must be >= 1, got {workers}")
    if workers > n_edges:
        raise ValueError(f"worker count {workers} exceeds number of edges {n_edges}")
    order = np.arange(n_edges, dtype=np.int64)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    parts = []
    start = 0
    for rank, size in enumerate(partition_sizes(n_edges, workers)):
        ids = order[start: start + size]
        cams, pts = build_local_maps(problem, ids)
        parts.append(EdgePartition(rank, ids, cams, pts))
        start += size
    return parts
