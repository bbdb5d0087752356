from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_icp.spatial import (
    NnIndex,
    PointCloud,
    build_index,
    estimate_normals,
    lower_median,
    median_neighbor_distance,
    median_plane_distance,
    nearest,
)


def brute_nearest(points, q):
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))  # first minimum = smallest index
    return i, d[i]


def brute_neighbor_dists(points, k):
    D = np.linalg.norm(points[:, None] - points[None], axis=2)
    out = []
    for i in range(len(points)):
        row = np.delete(D[i], i)
        out.append(np.sort(row)[:k])
    return np.array(out)


def naive_lower_median(values):
    s = sorted(values)
    return s[(len(s) - 1) // 2]


def test_lower_median():
    assert lower_median([3.0, 1.0, 2.0, 4.0]) == 2.0
    assert lower_median([5.0]) == 5.0
    with pytest.raises(ValueError):
        lower_median([])


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        build_index(PointCloud(np.zeros((0, 3))))


def test_single_point_index():
    idx = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])))
    i, p, d = nearest(idx, [10, 0, 0])
    assert i == 0 and np.array_equal(p, [1, 2, 3])


def test_two_point_geometry():
    idx = build_index(PointCloud(np.array([[0.0, 0, 0], [10.0, 0, 0]])))
    i, p, d = nearest(idx, [1, 0, 0])
    assert i == 0 and d == 1.0


def test_query_existing_point():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    i, p, d = nearest(build_index(PointCloud(pts)), pts[17])
    assert i == 17 and d == 0.0


def test_matches_linear_scan():
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(1000, 3))
    qs = rng.uniform(size=(100, 3))
    idx, dist = build_index(PointCloud(pts)).query(qs)
    for q, i, d in zip(qs, idx, dist):
        bi, bd = brute_nearest(pts, q)
        assert i == bi and d == pytest.approx(bd, abs=1e-15)


def test_ties_resolve_to_smallest_index():
    # lattice with many exactly equidistant neighbours
    g = np.arange(4.0)
    pts = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    rng = np.random.default_rng(2)
    pts = pts[rng.permutation(len(pts))]
    qs = np.array(np.meshgrid(g[:-1] + 0.5, g[:-1] + 0.5, g[:-1] + 0.5)).reshape(3, -1).T
    qs = np.vstack([qs, [[0.5, 0, 0], [1, 1.5, 2]]])
    idx, _ = build_index(PointCloud(pts)).query(qs)
    for q, i in zip(qs, idx):
        assert i == brute_nearest(pts, q)[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_nearest_property(n, seed):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.uniform(size=(n, 3)), 1)  # rounding creates duplicates and ties
    qs = np.round(rng.uniform(size=(20, 3)), 2)
    idx, dist = NnIndex(pts).query(qs)
    for q, i, d in zip(qs, idx, dist):
        bi, bd = brute_nearest(pts, q)
        assert i == bi and d == pytest.approx(bd, abs=1e-15)


def test_normals_on_plane():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(size=(200, 2)), np.zeros(200)])
    for k in (3, 10, 30):
        n = estimate_normals(PointCloud(pts), k).normals
        assert np.abs(np.abs(n[:, 2]) - 1).max() < 1e-6


def test_normals_on_sphere():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(5000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    n = estimate_normals(PointCloud(pts), 30).normals
    cos = np.einsum("ij,ij->i", n, pts)
    assert np.degrees(np.arccos(np.clip(cos.min(), -1, 1))) < 5.0


def test_normals_too_few_points():
    with pytest.raises(ValueError):
        estimate_normals(PointCloud(np.random.default_rng(0).normal(size=(10, 3))), 30)


def test_median_neighbor_distance_lattice():
    h = 0.25
    pts = np.column_stack([h * np.arange(40.0), np.zeros(40), np.zeros(40)])
    expected = naive_lower_median([naive_lower_median(r) for r in brute_neighbor_dists(pts, 6)])
    got = median_neighbor_distance(PointCloud(pts), 6)
    assert got == pytest.approx(expected, abs=1e-15)
    assert h <= got <= 3 * h


def test_median_neighbor_distance_coincident():
    assert median_neighbor_distance(PointCloud(np.ones((7, 3))), 6) == 0.0


def test_median_neighbor_distance_random():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(100, 3))
    expected = naive_lower_median([naive_lower_median(r) for r in brute_neighbor_dists(pts, 6)])
    assert median_neighbor_distance(PointCloud(pts), 6) == pytest.approx(expected, abs=1e-15)
    # permutation invariance
    perm = rng.permutation(100)
    assert median_neighbor_distance(PointCloud(pts[perm]), 6) == pytest.approx(expected, abs=1e-15)


def brute_plane_distance(pts, normals, k):
    D = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    per_point = []
    for i in range(len(pts)):
        order = [j for j in np.argsort(D[i], kind="stable") if j != i][:k]
        per_point.append(naive_lower_median([abs((pts[j] - pts[i]) @ normals[i]) for j in order]))
    return naive_lower_median(per_point)


def test_median_plane_distance():
    rng = np.random.default_rng(6)
    pts = np.column_stack([rng.uniform(size=(80, 2)), np.zeros(80)])
    normals = np.tile([0.0, 0.0, 1.0], (80, 1))
    assert median_plane_distance(PointCloud(pts, normals)) == 0.0
    eps = 1e-3
    jittered = pts.copy()
    jittered[:, 2] = eps * rng.choice([-1.0, 1.0], size=80)
    got = median_plane_distance(PointCloud(jittered, normals))
    assert got <= 2 * eps
    assert got == pytest.approx(brute_plane_distance(jittered, normals, 6), abs=1e-15)
    # random cloud with random normals
    pts = rng.normal(size=(60, 3))
    nr = rng.normal(size=(60, 3))
    nr /= np.linalg.norm(nr, axis=1, keepdims=True)
    assert median_plane_distance(PointCloud(pts, nr)) == pytest.approx(brute_plane_distance(pts, nr, 6), abs=1e-14)


def test_median_plane_distance_needs_normals():
    with pytest.raises(ValueError):
        median_plane_distance(PointCloud(np.zeros((10, 3))))


def test_point_cloud_transformed_rotates_normals():
    from robust_icp.lie import RigidTransform, so3_exp

    T = RigidTransform(so3_exp([0, 0, math.pi / 2]), np.array([1.0, 0, 0]))
    c = PointCloud(np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]])).transformed(T)
    assert np.allclose(c.points, [[1, 1, 0]], atol=1e-15)
    assert np.allclose(c.normals, [[0, 1, 0]], atol=1e-15)
