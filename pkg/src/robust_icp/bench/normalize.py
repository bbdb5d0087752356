"""Shared similarity normalisation of a source/target pair.

Both clouds are moved by the same translation (midpoint of their centroids to
the origin) and scaled by the same factor (combined bounding-box diagonal to
1). Moving each cloud to its own centroid would pre-solve the translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..lie import RigidTransform
from ..spatial import PointCloud


@dataclass(frozen=True)
class Normalization:
    """x' = scale * (x - center)."""

    center: np.ndarray
    scale: float

    def forward(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) - self.center)

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) / self.scale + self.center

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.forward(cloud.points), cloud.normals)

    def normalize_transform(self, T: RigidTransform) -> RigidTransform:
        t = self.scale * (T.R @ self.center + T.t - self.center)
        return RigidTransform(T.R, t)

    def denormalize_transform(self, T: RigidTransform) -> RigidTransform:
        """Map a transform between normalised clouds back to input coordinates."""
        t = T.t / self.scale + self.center - T.R @ self.center
        return RigidTransform(T.R, t)


def normalize_pair(src: PointCloud, tgt: PointCloud) -> tuple[PointCloud, PointCloud, Normalization]:
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("cannot normalise an empty cloud")
    center = 0.5 * (src.points.mean(axis=0) + tgt.points.mean(axis=0))
    both = np.vstack([src.points, tgt.points])
    diag = float(np.linalg.norm(both.max(axis=0) - both.min(axis=0)))
    if not diag > 0.0:
        raise ValueError("degenerate input: bounding box has zero diagonal")
    norm = Normalization(center, 1.0 / diag)
    return norm.apply(src), norm.apply(tgt), norm
