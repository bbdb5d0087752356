"""Point clouds, exact nearest-neighbour search, normals and density statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def lower_median(values, axis=None):
    """Median that picks the lower middle element for even counts."""
    v = np.sort(np.asarray(values, dtype=float), axis=axis)
    if axis is None:
        v = v.ravel()
        if v.size == 0:
            raise ValueError("median of an empty sequence")
        return float(v[(v.size - 1) // 2])
    n = v.shape[axis]
    return np.take(v, (n - 1) // 2, axis=axis)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-9):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> PointCloud:
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def transformed(self, T) -> PointCloud:
        normals = None if self.normals is None else self.normals @ T.R.T
        return PointCloud(T.apply(self.points), normals)


class NnIndex:
    """Exact nearest-neighbour index over a fixed set of target points.

    Ties are resolved towards the smallest target index, the same answer a
    linear scan with ``argmin`` gives.
    """

    def __init__(self, cloud: PointCloud | np.ndarray, workers: int = 1):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        pts = np.ascontiguousarray(pts.reshape(-1, 3))
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self.workers = workers
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest target index and distance for each row of ``queries``."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(2, len(self.points))
        dist, idx = self._tree.query(q, k=k, workers=self.workers)
        if k == 1:
            idx = idx.reshape(-1)
        else:
            d1, d2 = dist[:, 0], dist[:, 1]
            tied = np.flatnonzero(d2 <= d1 * (1.0 + 1e-9) + 1e-15)
            idx = idx[:, 0].copy()
            for i in tied:
                idx[i] = self._resolve_tie(q[i], d1[i])
        dist = np.linalg.norm(self.points[idx] - q, axis=1)
        return idx, dist

    def _resolve_tie(self, x, d) -> int:
        cand = np.asarray(self._tree.query_ball_point(x, d * (1.0 + 1e-9) + 1e-15), dtype=int)
        cand.sort()
        cd = np.linalg.norm(self.points[cand] - x, axis=1)
        return int(cand[np.argmin(cd)])

    def knn(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        dist, idx = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=k, workers=self.workers)
        return dist.reshape(-1, k), idx.reshape(-1, k)


def build_index(cloud: PointCloud, workers: int = 1) -> NnIndex:
    return NnIndex(cloud, workers=workers)


def nearest(index: NnIndex, p) -> tuple[int, np.ndarray, float]:
    idx, dist = index.query(p)
    return int(idx[0]), index.points[idx[0]].copy(), float(dist[0])


def _neighbours(cloud: PointCloud, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours of every point, the point itself excluded."""
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points, got {n}")
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(cloud.points, k=k + 1)
    own = idx == np.arange(n)[:, None]
    # drop the self entry; coincident duplicates may push it off column 0
    drop = np.where(own.any(axis=1), own.argmax(axis=1), k)
    keep = np.ones_like(own)
    keep[np.arange(n), drop] = False
    return dist[keep].reshape(n, k), idx[keep].reshape(n, k)


def estimate_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    """PCA normals from each point and its k nearest neighbours.

    Each normal is oriented away from the cloud centroid.
    """
    _, idx = _neighbours(cloud, k)
    pts = cloud.points
    nb = np.concatenate([pts[:, None, :], pts[idx]], axis=1)
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = pts - pts.mean(axis=0)
    normals[np.einsum("ij,ij->i", normals, outward) < 0.0] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def median_neighbor_distance(cloud: PointCloud, k: int = 6) -> float:
    """Median over points of the median distance to their k nearest neighbours."""
    dist, _ = _neighbours(cloud, k)
    return lower_median(lower_median(dist, axis=1))


def mean_neighbor_distance(cloud: PointCloud, k: int = 6) -> float:
    """Mean over points of the median distance to their k nearest neighbours."""
    dist, _ = _neighbours(cloud, k)
    return float(np.mean(lower_median(dist, axis=1)))


def median_plane_distance(cloud: PointCloud, k: int = 6) -> float:
    """Median over points q of the median distance from q's k nearest
    neighbours to the tangent plane at q."""
    if cloud.normals is None:
        raise ValueError("median_plane_distance needs normals")
    _, idx = _neighbours(cloud, k)
    offsets = cloud.points[idx] - cloud.points[:, None, :]
    h = np.abs(np.einsum("nkj,nj->nk", offsets, cloud.normals))
    return lower_median(lower_median(h, axis=1))
