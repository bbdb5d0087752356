from __future__ import annotations

import numpy as np
import pytest

from robust_icp.bench.synth import SyntheticSpec, make_model, make_problem, random_transform
from robust_icp.lie import RigidTransform, se3_exp, se3_log
from robust_icp.p2plane import (
    P2PlaneConfig,
    PlaneCorrespondences,
    compute_nu_max_p2pl,
    compute_nu_min_p2pl,
    energy_p2plane,
    gauss_newton_step,
    grad_plane_distance,
    icp_plane,
    icp_robust_plane,
    line_search,
    plane_distance,
    plane_distance_jacobian,
)
from robust_icp.p2point import welsch
from robust_icp.report import FALLBACK, LINESEARCH, PLAIN
from robust_icp.spatial import PointCloud, median_plane_distance


def central_diff(xi, p, q, n, h=1e-6):
    g = np.zeros(6)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        g[j] = (plane_distance(xi + e, p, q, n)[0] - plane_distance(xi - e, p, q, n)[0]) / (2 * h)
    return g


def random_config(rng, angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xi = np.concatenate([axis * angle, rng.normal(size=3)])
    n = rng.normal(size=(1, 3))
    return xi, rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), n / np.linalg.norm(n)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        xi, p, q, n = random_config(rng, rng.uniform(0.1, 3.0))
        g = central_diff(xi, p, q, n)
        assert np.linalg.norm(grad_plane_distance(xi, p, q, n) - g) / np.linalg.norm(g) < 1e-5


@pytest.mark.parametrize("angle", [0.0, 1e-9, 1e-6, 5e-5, 9.9e-5, 1e-4, 2e-4, 1e-2])
def test_gradient_near_zero_rotation(angle):
    rng = np.random.default_rng(1)
    for _ in range(10):
        xi, p, q, n = random_config(rng, angle)
        g = central_diff(xi, p, q, n)
        assert np.linalg.norm(grad_plane_distance(xi, p, q, n) - g) / np.linalg.norm(g) < 1e-5


def test_gradient_zero_branch_translation_block():
    n = np.array([[0.0, 0.6, 0.8]])
    p = np.array([[0.3, -0.2, 0.5]])
    J = grad_plane_distance(np.zeros(6), p, p, n)
    assert np.allclose(J[3:], n[0], atol=0)


def test_gradient_continuous_at_zero():
    rng = np.random.default_rng(2)
    _, p, q, n = random_config(rng, 0.0)
    u = rng.normal(size=3)
    a = grad_plane_distance(np.r_[0.0, 0, 0, u], p, q, n)
    b = grad_plane_distance(np.r_[1e-9, 0, 0, u], p, q, n)
    assert np.abs(a - b).max() < 1e-6


def test_jacobian_rows_match_single():
    rng = np.random.default_rng(3)
    xi = rng.normal(size=6)
    P, Q, N = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    J = plane_distance_jacobian(xi, P, Q, N)
    for i in range(5):
        assert np.allclose(J[i], grad_plane_distance(xi, P[i : i + 1], Q[i : i + 1], N[i : i + 1]), atol=1e-14)


def corr_at(xi, P, Q, N, gamma=None):
    B = plane_distance(xi, P, Q, N)
    return PlaneCorrespondences(P, Q, N, B, np.ones(len(P)) if gamma is None else gamma)


def test_energy_p2plane():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(20, 3))
    N = rng.normal(size=(20, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    I = RigidTransform.identity()
    assert energy_p2plane(P, I, corr_at(np.zeros(6), P, P, N), 0.3) == 0.0
    one = corr_at(np.zeros(6), P[:1], P[:1] - 0.2 * N[:1], N[:1])
    assert energy_p2plane(P[:1], I, one, 0.3) == pytest.approx(welsch(0.2, 0.3), rel=1e-14)
    T = se3_exp(rng.normal(size=6) * 0.3)
    Q = rng.normal(size=(20, 3))
    c = corr_at(np.zeros(6), P, Q, N)
    naive = sum(1 - np.exp(-(((T.R @ p + T.t - q) @ n) ** 2) / (2 * 0.3**2)) for p, q, n in zip(P, Q, N))
    assert energy_p2plane(P, T, c, 0.3) == pytest.approx(naive, rel=1e-12)


def test_gn_stationary_when_on_planes():
    rng = np.random.default_rng(5)
    P = rng.normal(size=(30, 3))
    N = rng.normal(size=(30, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    xi = rng.normal(size=6) * 0.2
    Q = se3_exp(xi).apply(P)
    assert np.abs(gauss_newton_step(corr_at(xi, P, Q, N), xi) - xi).max() < 1e-12


def test_gn_single_plane_toy():
    P = np.array([[1.0, 1, 0], [-1, -1, 0], [1, -1, 0], [-1, 1, 0]])
    N = np.tile([0.0, 0, 1], (4, 1))
    offsets = np.array([0.3, 0.3, -0.1, -0.1])
    gamma = np.array([0.9, 0.9, 0.4, 0.4])
    Q = P + offsets[:, None] * N
    xi = gauss_newton_step(corr_at(np.zeros(6), P, Q, N, gamma), np.zeros(6))
    assert xi[5] == pytest.approx(np.sum(gamma * offsets) / np.sum(gamma), abs=1e-8)
    assert np.abs(xi[:5]).max() < 1e-8


def test_gn_normal_equations():
    rng = np.random.default_rng(6)
    P, Q = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    N = rng.normal(size=(50, 3))
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    gamma = rng.uniform(0.1, 1.0, 50)
    xk = rng.normal(size=6) * 0.5
    c = corr_at(xk, P, Q, N, gamma)
    xs = gauss_newton_step(c, xk)
    J = plane_distance_jacobian(xk, P, Q, N)
    A = J.T @ (gamma[:, None] * J)
    rhs = J.T @ (gamma * (J @ xk - c.distance))
    assert np.linalg.norm(A @ xs - rhs) / np.linalg.norm(rhs) < 1e-10


def test_line_search_first_trial_accepted():
    def energy(x):
        return float((x[0] - 1.0) ** 2)

    xi, E, kind, trials = line_search(energy, np.zeros(1), np.array([1.2]), energy([5.0]), 1.0)
    assert kind == PLAIN and len(trials) == 1 and xi[0] == 1.2


def test_line_search_halves_overshoot():
    def energy(x):
        return float((x[0] - 1.0) ** 2)

    xi, E, kind, trials = line_search(energy, np.zeros(1), np.array([3.0]), 4.0, 1.0)
    assert kind == LINESEARCH
    assert [t for t, _ in trials] == [1.0, 0.5]
    assert xi[0] == 1.5 and E == 0.25 < 1.0


def test_line_search_fallback_returns_best_trial():
    def energy(x):
        return float((x[0] - 1.0) ** 2)

    xi, E, kind, trials = line_search(energy, np.zeros(1), np.array([3.0]), 4.0, -1.0, l_max=6)
    assert kind == FALLBACK and len(trials) == 6
    assert E == min(e for _, e in trials)


def test_nu_bounds_p2pl():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(100, 3))
    normals = np.tile([0.0, 0, 1], (100, 1))
    tgt = PointCloud(pts, normals)
    assert compute_nu_min_p2pl(tgt) == pytest.approx(median_plane_distance(tgt) / 6.0, rel=1e-15)
    # plane distances of the sources: lower median 0.01 -> 0.03
    tgt = PointCloud(np.array([[0.0, 0, 0]]), np.array([[0.0, 0, 1]]))
    src = np.array([[0, 0, 0.0], [0, 0, 0.01], [0, 0, -0.02], [0, 0, 0.005], [0, 0, 0.5]])
    assert compute_nu_max_p2pl(src, tgt) == pytest.approx(0.03, abs=1e-15)
    with pytest.raises(ValueError):
        compute_nu_max_p2pl(src, PointCloud(np.zeros((1, 3))))


def test_stage_iteration_caps():
    cfg = P2PlaneConfig()
    assert [cfg.stage_iterations(s) for s in range(7)] == [6, 7, 8, 9, 10, 10, 10]


@pytest.fixture(scope="module")
def clean_problem():
    model = make_model(800, seed=3)
    T = random_transform(np.random.default_rng(8), 25.0, 0.1)
    return model, model.transformed(T), T


@pytest.mark.parametrize("solver", [icp_plane, icp_robust_plane])
def test_identical_clouds(solver):
    model = make_model(300, seed=2)
    rep = solver(model, model, ground_truth=RigidTransform.identity())
    assert rep.rmse < 1e-10


@pytest.mark.parametrize("solver", [icp_plane, icp_robust_plane])
def test_exact_recovery(solver, clean_problem):
    src, tgt, T = clean_problem
    rep = solver(src, tgt, ground_truth=T)
    assert rep.rmse < 1e-6
    assert rep.trace.monotonicity_violations() == []


def test_robust_plane_trace_is_monotone_per_stage():
    model = make_model(1500, seed=0)
    src, tgt, T = make_problem(model, SyntheticSpec(seed=2, noise_sigma_mode="neighbor-median"))
    rep = icp_robust_plane(src, tgt, ground_truth=T)
    assert rep.trace.monotonicity_violations() == []
    for stage, records in enumerate(rep.trace.stages()):
        assert len(records) <= P2PlaneConfig().stage_iterations(stage)


def test_robust_plane_beats_classical_partial_overlap():
    model = make_model(2000, seed=0)
    src, tgt, T = make_problem(model, SyntheticSpec(seed=1))
    assert icp_robust_plane(src, tgt, ground_truth=T).rmse * 5 <= icp_plane(src, tgt, ground_truth=T).rmse


def test_normals_estimated_when_missing(clean_problem):
    src, tgt, T = clean_problem
    rep = icp_robust_plane(src, PointCloud(tgt.points), ground_truth=T)
    assert any("estimated" in n for n in rep.notes)
    assert rep.rmse < 1e-2


def test_initial_transform_used(clean_problem):
    src, tgt, T = clean_problem
    rep = icp_robust_plane(src, tgt, P2PlaneConfig(initial_transform=T), ground_truth=T)
    assert rep.rmse < 1e-8
    assert np.abs(se3_log(rep.final_transform) - se3_log(T)).max() < 1e-8
