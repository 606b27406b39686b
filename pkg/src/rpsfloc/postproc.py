"""Threshold + cluster extraction of point sources from a volume.

Voxels below threshold_frac * max(volume) are discarded, survivors are
merged by single-linkage clustering (any chain of voxels pairwise
within cluster_radius collapses into one cluster), and each cluster is
reported as its intensity-weighted centroid with the cluster's total
weight.  Output rows are (x, y, z, weight) in voxel units, sorted by
(z, y, x) so runs are comparable.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, DomainError, ShapeError


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        parent = self.parent
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def extract_points(
    volume: np.ndarray,
    threshold_frac: float = 0.05,
    cluster_radius: float = 2.0,
) -> np.ndarray:
    """Extract an (N, 4) point set [x, y, z, weight] from a volume.

    threshold_frac  in [0, 1); voxels with value >= threshold_frac * max
                    survive
    cluster_radius  single-linkage merge distance in (isotropic) voxels
    """
    if not (0 <= threshold_frac < 1):
        raise ConfigurationError("threshold_frac must lie in [0, 1)")
    if cluster_radius < 0:
        raise ConfigurationError("cluster_radius must be nonnegative")
    x = np.asarray(volume, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError("expected an (H, W, D) volume")
    if np.any(x < 0):
        raise DomainError("volume must be nonnegative")

    peak = float(x.max()) if x.size else 0.0
    if peak <= 0:
        return np.zeros((0, 4))
    survivors = np.argwhere(x >= threshold_frac * peak)
    weights = x[survivors[:, 0], survivors[:, 1], survivors[:, 2]]
    keep = weights > 0
    survivors = survivors[keep]
    weights = weights[keep]
    n = survivors.shape[0]
    if n == 0:
        return np.zeros((0, 4))

    uf = _UnionFind(n)
    if cluster_radius > 0 and n > 1:
        tree = cKDTree(survivors.astype(np.float64))
        for i, j in tree.query_pairs(cluster_radius):
            uf.union(i, j)

    roots = np.array([uf.find(i) for i in range(n)])
    points = []
    for root in np.unique(roots):
        members = roots == root
        w = weights[members]
        c = survivors[members].astype(np.float64)
        total = float(w.sum())
        centroid = (w[:, None] * c).sum(axis=0) / total
        points.append([centroid[0], centroid[1], centroid[2], total])
    out = np.asarray(points, dtype=np.float64)
    order = np.lexsort((out[:, 0], out[:, 1], out[:, 2]))
    return out[order]
