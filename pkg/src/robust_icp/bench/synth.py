"""Synthetic registration problems: partial-overlap splits, normal-direction
Gaussian noise and uniform bounding-box outliers.

Randomness comes from one ``numpy.random.SeedSequence`` per seed with a fixed
child stream per purpose, so e.g. changing the outlier ratio leaves the noise
draws untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..lie import RigidTransform, so3_exp
from ..spatial import PointCloud, mean_neighbor_distance

# child stream layout of SeedSequence(seed).spawn(_N_STREAMS)
_STREAM = {"transform": 0, "source-noise": 1, "target-noise": 2, "outliers": 3, "model": 4}
_N_STREAMS = 5


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    child = np.random.SeedSequence(seed).spawn(_N_STREAMS)[_STREAM[purpose]]
    return np.random.Generator(np.random.PCG64(child))


@dataclass
class SyntheticSpec:
    overlap_front_fraction: float = 0.6
    overlap_back_fraction: float = 0.47
    noise_sigma_mode: Literal["none", "neighbor-median"] = "none"
    outlier_fraction: float = 0.0
    seed: int = 0
    ground_truth: RigidTransform | None = None
    max_rotation_deg: float = 30.0
    max_translation: float = 0.1
    neighbors: int = 6

    def __post_init__(self):
        for f in (self.overlap_front_fraction, self.overlap_back_fraction):
            if not 0.0 < f <= 1.0:
                raise ValueError("overlap fractions must lie in (0, 1]")
        if self.outlier_fraction < 0:
            raise ValueError("outlier fraction must be non-negative")
        if self.noise_sigma_mode not in ("none", "neighbor-median"):
            raise ValueError(f"unknown noise mode {self.noise_sigma_mode!r}")


def random_transform(rng: np.random.Generator, max_rotation_deg: float, max_translation: float) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(max_rotation_deg) * rng.uniform()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    t = direction * max_translation * rng.uniform()
    return RigidTransform(so3_exp(axis * angle), t)


def rotation_about_random_axis(rng: np.random.Generator, angle_deg: float) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform(so3_exp(axis * math.radians(angle_deg)), np.zeros(3))


# implicit surface: bumpy ellipsoid with phase-shifted bumps to break symmetry
_AXES = np.array([1.0, 0.75, 0.55])
_BUMP, _FREQ, _PHASE = 0.12, 4.0, np.array([0.3, 1.1, 0.7])


def _surface(x: np.ndarray) -> np.ndarray:
    s = np.sin(_FREQ * x + _PHASE)
    return np.sum((x / _AXES) ** 2, axis=-1) + _BUMP * s[..., 0] * s[..., 1] * s[..., 2] - 1.0


def _surface_grad(x: np.ndarray) -> np.ndarray:
    s = np.sin(_FREQ * x + _PHASE)
    c = np.cos(_FREQ * x + _PHASE)
    g = 2.0 * x / _AXES**2
    g[..., 0] += _BUMP * _FREQ * c[..., 0] * s[..., 1] * s[..., 2]
    g[..., 1] += _BUMP * _FREQ * s[..., 0] * c[..., 1] * s[..., 2]
    g[..., 2] += _BUMP * _FREQ * s[..., 0] * s[..., 1] * c[..., 2]
    return g


# virtual scanner directions used to order model points like merged scans
_VIEWS = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) / math.sqrt(3.0)
_VISIBLE = 0.25


def _scan_order(points: np.ndarray, normals: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # each point goes to a random scan that sees it; scans are concatenated
    facing = normals @ _VIEWS.T
    visible = facing > _VISIBLE
    unseen = ~visible.any(axis=1)
    visible[unseen, np.argmax(facing[unseen], axis=1)] = True
    scan = np.argmax(rng.uniform(size=visible.shape) * visible, axis=1)
    return np.lexsort((points[:, 0], scan))


def make_model(n: int = 5000, seed: int = 0) -> PointCloud:
    """Points on a closed bumpy surface with analytic normals.

    The cloud is centred and scaled to a bounding-box diagonal of 1. Points
    are ordered like a model merged from four overlapping scans: each point
    belongs to one scan that sees it, scans follow one another, and within a
    scan points are sorted by x. A leading and a trailing fraction of the
    list therefore overlap on the regions seen by several scans.
    """
    rng = rng_for(seed, "model")
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lo, hi = np.zeros(n), np.full(n, 2.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        outside = _surface(d * mid[:, None]) > 0.0
        hi = np.where(outside, mid, hi)
        lo = np.where(outside, lo, mid)
    pts = d * (0.5 * (lo + hi))[:, None]
    normals = _surface_grad(pts)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pts -= 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    pts /= np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
    order = _scan_order(pts, normals, rng)
    return PointCloud(pts[order], normals[order])


def _count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 0.5))


def make_partial_overlap(cloud: PointCloud, spec: SyntheticSpec) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """Source = leading fraction of the ordered points; target = trailing
    fraction moved by the ground-truth transform."""
    n = len(cloud)
    n_src = _count(spec.overlap_front_fraction, n)
    n_tgt = _count(spec.overlap_back_fraction, n)
    if n_src < 1 or n_tgt < 1 or n_src > n or n_tgt > n:
        raise ValueError("overlap fractions do not fit the cloud size")
    T_true = spec.ground_truth
    if T_true is None:
        T_true = random_transform(rng_for(spec.seed, "transform"), spec.max_rotation_deg, spec.max_translation)
    src = cloud.subset(slice(0, n_src))
    tgt = cloud.subset(slice(n - n_tgt, n)).transformed(T_true)
    return src, tgt, T_true


def noise_sigma(cloud: PointCloud, k: int = 6) -> float:
    """Average over points of the median distance to their k nearest neighbours."""
    return mean_neighbor_distance(cloud, k)


def add_noise_and_outliers(cloud: PointCloud, spec: SyntheticSpec, role: str = "source") -> PointCloud:
    """Gaussian displacement along the normals, then uniform outliers inside
    the bounding box (outliers only when ``role == "source"``).

    Outliers have no normals, so the result drops normals when any are added.
    """
    pts = cloud.points.copy()
    normals = cloud.normals
    if spec.noise_sigma_mode == "neighbor-median":
        if normals is None:
            raise ValueError("normal-direction noise needs normals")
        sigma = noise_sigma(cloud, spec.neighbors)
        rng = rng_for(spec.seed, f"{role}-noise")
        pts = pts + normals * (sigma * rng.standard_normal(len(pts)))[:, None]
    n_out = _count(spec.outlier_fraction, len(pts)) if role == "source" else 0
    if n_out == 0:
        return PointCloud(pts, normals)
    rng = rng_for(spec.seed, "outliers")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extra = lo + (hi - lo) * rng.uniform(size=(n_out, 3))
    return PointCloud(np.vstack([pts, extra]))


def make_problem(cloud: PointCloud, spec: SyntheticSpec) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """Partial-overlap split followed by noise on both sides and outliers on
    the source. Target normals are kept (the underlying surface is known)."""
    src, tgt, T_true = make_partial_overlap(cloud, spec)
    src = add_noise_and_outliers(src, spec, role="source")
    # noise is drawn before the rigid motion so it does not depend on it
    tgt_local = tgt.transformed(T_true.inverse())
    tgt = add_noise_and_outliers(tgt_local, spec, role="target").transformed(T_true)
    return src, tgt, T_true
