from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from ..lie import RigidTransform
from ..spatial import PointCloud


def rmse(src, T_est: RigidTransform, T_true: RigidTransform) -> float:
    """Root mean squared distance between the source points moved by the
    estimate and by the ground truth."""
    pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("rmse of an empty cloud")
    d = T_true.apply(pts) - T_est.apply(pts)
    return float(np.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))


def alpha_recall(rmses: Iterable[float], alpha: float) -> float:
    """Fraction of cases with RMSE strictly below ``alpha``."""
    r = np.asarray(list(rmses), dtype=float)
    if r.size == 0:
        raise ValueError("alpha_recall needs at least one case")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return float(np.count_nonzero(r < alpha)) / r.size
