"""Point-cloud tokenization: FPS centers, KNN groups, group encoder.

A raw N x 3 cloud becomes M tokens: farthest point sampling picks M
centers, each center collects its K nearest neighbors stored relative to
the center, and a shared per-point MLP with max pooling turns each group
into one embedding row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geom
from .autodiff import Tensor
from .nn import MLP, Module


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ad.ShapeError(f"point cloud must be (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")


@dataclass
class PointGroups:
    center_indices: np.ndarray  # (M,) int64
    centers: np.ndarray         # (M, 3)
    groups: np.ndarray          # (M, K, 3), coordinates relative to the center


@dataclass
class CloudTransform:
    centroid: np.ndarray  # (3,)
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centroid) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.centroid


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return PointCloud(np.asarray(cloud)).points


def fps(cloud, m: int) -> np.ndarray:
    """Greedy farthest-point sampling; returns m distinct indices.

    The first pick is the point farthest from the cloud centroid; every
    later pick maximizes the minimum distance to the picks so far. All
    distance ties resolve to the lowest index, which keeps the sequence
    deterministic and lets brute-force oracles match it exactly.
    """
    pts = _as_points(cloud)
    n = len(pts)
    if m < 1:
        raise ValueError(f"fps needs m >= 1, got {m}")
    if m > n:
        raise ValueError(f"fps asked for {m} centers from a cloud of {n} points")
    centroid = pts.mean(axis=0)
    start = int(np.argmax(geom.get_backend("py").sqdist_to(pts, centroid)))
    return geom.fps_kernel(np.ascontiguousarray(pts), m, start)


def knn_group(cloud, center_indices, k: int) -> PointGroups:
    """K nearest neighbors per center, stored center-relative.

    The center itself sits at distance zero so it is always part of its own
    group; ties resolve to the lowest index.
    """
    pts = _as_points(cloud)
    n = len(pts)
    if k < 1:
        raise ValueError(f"knn_group needs k >= 1, got {k}")
    if k > n:
        raise ValueError(f"knn_group asked for {k} neighbors from a cloud of {n} points")
    center_indices = np.asarray(center_indices, dtype=np.int64)
    idx = geom.knn_kernel(np.ascontiguousarray(pts), np.ascontiguousarray(center_indices), k)
    centers = pts[center_indices]
    groups = pts[idx] - centers[:, None, :]
    return PointGroups(center_indices=center_indices, centers=centers, groups=groups)


def normalize_cloud(cloud) -> tuple[PointCloud, CloudTransform]:
    """Shift the centroid to the origin and scale the max radius to 1.

    Degenerate clouds (all points coincident) are only shifted. The returned
    transform reproduces the normalization and inverts it.
    """
    pts = _as_points(cloud)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered * centered).sum(axis=1).max()))
    scale = radius if radius > 0.0 else 1.0
    tf = CloudTransform(centroid=centroid, scale=scale)
    return PointCloud(centered / scale), tf


class GroupEncoder(Module):
    """Shared per-point MLP (3 -> hidden -> d) followed by max pooling over
    the group axis; permutation-invariant within each group."""

    def __init__(self, hidden: int, dim: int, rng: np.random.Generator):
        self.mlp = MLP([3, hidden, dim], rng)
        self.dim = dim

    def __call__(self, groups) -> Tensor:
        """groups: (..., K, 3) array or Tensor -> (..., d) tokens."""
        if not isinstance(groups, Tensor):
            groups = Tensor(np.asarray(groups))
        per_point = self.mlp(groups)
        return ad.max_reduce(per_point, axis=-2)


def encode_groups(groups: PointGroups, encoder: GroupEncoder) -> Tensor:
    """Token matrix (M, d) for one grouped cloud."""
    return encoder(groups.groups)
