"""Point-to-plane registration over twist coordinates.

The robust solver minimises sum_i welsch(B_i) where B_i is the signed distance
from the transformed source point to the tangent plane at its closest target
point. Each step solves a weighted Gauss-Newton system in the six twist
coordinates, guarded by an energy check with a backtracking line search, and
is accelerated with Anderson acceleration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .accel import AndersonWindow
from .lie import RigidTransform, hat, se3_exp, se3_log
from .p2point import DegenerateAlignment, nu_schedule, resolve_nu_bounds, welsch
from .report import AA, FALLBACK, LINESEARCH, PLAIN, EnergyTrace, RegistrationReport, TraceRecord
from .spatial import NnIndex, PointCloud, estimate_normals, lower_median, median_plane_distance

# Below this rotation angle the closed-form twist Jacobian loses precision
# (it divides by |delta|^4); a second-order expansion is used instead.
_SMALL_ANGLE = 1e-4
_E = [hat(e) for e in np.eye(3)]


@dataclass
class P2PlaneConfig:
    m: int = 5
    iters_first_stage: int = 6
    iters_stage_increment: int = 1
    iters_stage_cap: int = 10
    trans_eps: float = 1e-5
    l_max: int = 20
    nu_max: float | None = None
    nu_min: float | None = None
    initial_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    # iteration limit of the un-robust baseline
    max_iters: int = 1000
    normal_neighbors: int = 30
    workers: int = 1

    def __post_init__(self):
        if self.trans_eps <= 0 or self.l_max < 1 or self.iters_first_stage < 1:
            raise ValueError("thresholds must be strictly positive")
        for name in ("nu_max", "nu_min"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.nu_max is not None and self.nu_min is not None and self.nu_min > self.nu_max:
            raise ValueError("nu_min must not exceed nu_max")

    def stage_iterations(self, stage: int) -> int:
        return min(self.iters_first_stage + stage * self.iters_stage_increment, self.iters_stage_cap)


@dataclass
class PlaneCorrespondences:
    """Per source point: closest target point, its normal, signed plane
    distance under the current transform, and Welsch weight."""

    points: np.ndarray
    qhat: np.ndarray
    nhat: np.ndarray
    distance: np.ndarray
    gamma: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def _twist_derivatives(xi):
    """R, t and the derivatives dR/d delta_j, dt/d delta, dt/du at ``xi``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    delta, u = xi[:3], xi[3:]
    T = se3_exp(xi)
    R, t = T.R, T.t
    theta2 = float(delta @ delta)
    K, Uh = hat(delta), hat(u)
    I = np.eye(3)
    if math.sqrt(theta2) < _SMALL_ANGLE:
        dR = [E + 0.5 * (E @ K + K @ E) for E in _E]
        dt_ddelta = np.column_stack([(0.5 * E + (E @ K + K @ E) / 6.0) @ u for E in _E])
        dt_du = I + 0.5 * K + (K @ K) / 6.0
        return R, t, dR, dt_ddelta, dt_du
    dR = [
        (delta[j] * K + hat(np.cross(delta, (I - R)[:, j]))) @ R / theta2
        for j in range(3)
    ]
    M = (R - I) @ Uh + (delta @ u) * I
    D = np.column_stack([dR[j] @ Uh @ delta for j in range(3)])
    dt_ddelta = (M + np.outer(delta, u) + D) / theta2 - 2.0 * np.outer(M @ delta, delta) / theta2**2
    dt_du = ((I - R) @ K + np.outer(delta, delta)) / theta2
    return R, t, dR, dt_ddelta, dt_du


def plane_distance_jacobian(xi, points, qhat, nhat) -> np.ndarray:
    """Gradients J_i of B_i(xi) = (R p_i + t - q_i) . n_i, one row per point."""
    _, _, dR, dt_ddelta, dt_du = _twist_derivatives(xi)
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    N = np.asarray(nhat, dtype=float).reshape(-1, 3)
    J = np.empty((len(P), 6))
    for j in range(3):
        J[:, j] = np.einsum("ij,ij->i", N, P @ dR[j].T) + N @ dt_ddelta[:, j]
    J[:, 3:] = N @ dt_du
    return J


def grad_plane_distance(xi, p, qhat, nhat) -> np.ndarray:
    return plane_distance_jacobian(xi, p, qhat, nhat)[0]


def plane_distance(xi, points, qhat, nhat) -> np.ndarray:
    T = se3_exp(xi)
    return np.einsum("ij,ij->i", T.apply(points) - qhat, nhat)


class _PlaneProblem:
    """Source points, target index with normals, and a small correspondence
    cache keyed on the twist."""

    def __init__(self, src_pts, tgt: PointCloud, workers: int = 1):
        self.P = src_pts
        self.index = NnIndex(tgt, workers=workers)
        self.normals = tgt.normals
        self._cache: dict[bytes, tuple] = {}

    def correspond(self, xi):
        key = np.asarray(xi, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            idx, _ = self.index.query(se3_exp(xi).apply(self.P))
            q, n = self.index.points[idx], self.normals[idx]
            hit = (q, n, plane_distance(xi, self.P, q, n))
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def correspondences(self, xi, nu: float | None) -> PlaneCorrespondences:
        q, n, B = self.correspond(xi)
        gamma = np.ones(len(B)) if nu is None else np.exp(-(B * B) / (2.0 * nu * nu))
        return PlaneCorrespondences(self.P, q, n, B, gamma)

    def energy(self, xi, nu: float | None) -> float:
        _, _, B = self.correspond(xi)
        if nu is None:
            return float(B @ B)
        return float(np.sum(welsch(B, nu)))


def energy_p2plane(src, transform: RigidTransform, correspondences: PlaneCorrespondences, nu: float) -> float:
    """Sum of Welsch penalties of the plane distances under ``transform``."""
    if correspondences.nhat is None:
        raise ValueError("plane energy needs target normals")
    pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=float)
    B = np.einsum("ij,ij->i", transform.apply(pts) - correspondences.qhat, correspondences.nhat)
    return float(np.sum(welsch(B, nu)))


def gauss_newton_step(corr: PlaneCorrespondences, xi_current) -> np.ndarray:
    """Minimiser of sum_i gamma_i (B_i + J_i . (xi - xi_current))^2."""
    xi_current = np.asarray(xi_current, dtype=float).reshape(6)
    J = plane_distance_jacobian(xi_current, corr.points, corr.qhat, corr.nhat)
    Jw = J * corr.gamma[:, None]
    A = J.T @ Jw
    b = -Jw.T @ corr.distance
    return xi_current + _solve_normal_equations(A, b)


def _solve_normal_equations(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.trace(A) / 6.0
    if not scale > 0.0:
        raise DegenerateAlignment("no effective plane constraints")
    for damping in (0.0, 1e-9 * scale):
        Ad = A + damping * np.eye(6)
        if np.linalg.cond(Ad) < 1e14:
            return np.linalg.solve(Ad, b)
    raise DegenerateAlignment("normal matrix is singular")


def line_search(energy, xi_prev, xi_candidate, E, E_prev: float, l_max: int = 20):
    """Backtrack from ``xi_candidate`` towards ``xi_prev`` with tau = 1, 1/2, ...

    ``E`` is the energy of the iterate under test. Returns ``(xi, E, kind,
    trials)``: the first trial below ``E_prev`` ends the search; otherwise the
    lowest trial seen (if it beats ``E``) is kept and flagged as a fallback.
    """
    xi_prev = np.asarray(xi_prev, dtype=float)
    step = np.asarray(xi_candidate, dtype=float) - xi_prev
    best_xi, best_E, kind = None, E, FALLBACK
    trials = []
    tau = 1.0
    for _ in range(l_max):
        xi_trial = xi_prev + tau * step
        E_trial = energy(xi_trial)
        trials.append((tau, E_trial))
        if E_trial < best_E:
            best_xi, best_E = xi_trial, E_trial
        if E_trial < E_prev:
            kind = PLAIN if tau == 1.0 else LINESEARCH
            break
        tau *= 0.5
    return best_xi, best_E, kind, trials


def compute_nu_max_p2pl(src, tgt: PointCloud, init: RigidTransform | None = None) -> float:
    """Three times the median initial |plane distance|."""
    if tgt.normals is None:
        raise ValueError("target normals are required")
    pts = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=float)
    prob = _PlaneProblem(pts, tgt)
    _, _, B = prob.correspond(se3_log(init or RigidTransform.identity()))
    return 3.0 * lower_median(np.abs(B))


def compute_nu_min_p2pl(tgt: PointCloud, k: int = 6) -> float:
    return median_plane_distance(tgt, k) / 6.0


def _with_normals(tgt, k: int) -> tuple[PointCloud, list[str]]:
    tgt = tgt if isinstance(tgt, PointCloud) else PointCloud(tgt)
    if tgt.normals is not None:
        return tgt, []
    return estimate_normals(tgt, k), [f"target normals estimated from {k} neighbours"]


def _rmse(P, T_est, T_true):
    if T_true is None:
        return None
    d = T_true.apply(P) - T_est.apply(P)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def icp_robust_plane(src, tgt, cfg: P2PlaneConfig | None = None, ground_truth: RigidTransform | None = None) -> RegistrationReport:
    """Welsch-robust point-to-plane ICP with line search and Anderson acceleration."""
    cfg = cfg or P2PlaneConfig()
    t0 = time.perf_counter()
    P = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=float).reshape(-1, 3)
    if len(P) == 0 or len(tgt) == 0:
        raise ValueError("source and target must be non-empty")
    tgt, notes = _with_normals(tgt, cfg.normal_neighbors)
    prob = _PlaneProblem(P, tgt, cfg.workers)
    trace = EnergyTrace()

    xi = se3_log(cfg.initial_transform)
    _, _, B0 = prob.correspond(xi)
    nu_max = cfg.nu_max if cfg.nu_max is not None else 3.0 * lower_median(np.abs(B0))
    nu_min = cfg.nu_min if cfg.nu_min is not None else compute_nu_min_p2pl(tgt)
    nu_max, nu_min, fixes = resolve_nu_bounds(nu_max, nu_min)
    notes.extend(fixes)

    def wall():
        return 1e3 * (time.perf_counter() - t0)

    def step(x, nu):
        return gauss_newton_step(prob.correspondences(x, nu), x)

    window = AndersonWindow(cfg.m)
    for stage, nu in enumerate(nu_schedule(nu_max, nu_min)):
        limit = cfg.stage_iterations(stage)
        window.reset()
        xi_prev = xi
        try:
            xi_star = step(xi_prev, nu)
        except DegenerateAlignment as exc:
            notes.append(f"stage {stage} (nu={nu:.3e}) skipped: {exc}")
            continue
        window.push_and_accelerate(xi_prev, xi_star)
        xi, kind = xi_star, PLAIN
        E_prev = math.inf
        n = 1
        while True:
            E = prob.energy(xi, nu)
            if E >= E_prev:
                found, E_found, kind, _ = line_search(
                    lambda x: prob.energy(x, nu), xi_prev, xi_star, E, E_prev, cfg.l_max
                )
                if found is not None:
                    xi, E = found, E_found
            E_prev = E
            try:
                xi_next = step(xi, nu)
            except DegenerateAlignment as exc:
                trace.append(TraceRecord(stage, n, nu, E, kind, math.nan, wall()))
                notes.append(f"stage {stage} (nu={nu:.3e}) ended early: {exc}")
                break
            dT = float(np.linalg.norm(se3_exp(xi).matrix() - se3_exp(xi_next).matrix()))
            trace.append(TraceRecord(stage, n, nu, E, kind, dT, wall()))
            if np.linalg.norm(xi_next - xi) < cfg.trans_eps or n >= limit:
                break
            xi_acc = window.push_and_accelerate(xi, xi_next)
            xi_prev, xi_star = xi, xi_next
            xi, kind = xi_acc, AA
            n += 1

    if not trace.records:
        raise DegenerateAlignment("; ".join(notes) or "no stage produced a step")
    T = se3_exp(xi)
    return RegistrationReport(
        method="robust-icp-pl",
        final_transform=T,
        trace=trace,
        iterations=len(trace),
        wall_time_seconds=time.perf_counter() - t0,
        rmse=_rmse(P, T, ground_truth),
        nu_max=nu_max,
        nu_min=nu_min,
        convergence=(
            f"per nu: ||dxi|| < {cfg.trans_eps:g} or "
            f"{cfg.iters_first_stage}+{cfg.iters_stage_increment}/stage (cap {cfg.iters_stage_cap}) iterations"
        ),
        notes=notes,
    )


def icp_plane(src, tgt, cfg: P2PlaneConfig | None = None, ground_truth: RigidTransform | None = None) -> RegistrationReport:
    """Classical point-to-plane ICP: one unit-weight Gauss-Newton step per
    correspondence update."""
    cfg = cfg or P2PlaneConfig()
    t0 = time.perf_counter()
    P = src.points if isinstance(src, PointCloud) else np.asarray(src, dtype=float).reshape(-1, 3)
    if len(P) == 0 or len(tgt) == 0:
        raise ValueError("source and target must be non-empty")
    tgt, notes = _with_normals(tgt, cfg.normal_neighbors)
    prob = _PlaneProblem(P, tgt, cfg.workers)
    trace = EnergyTrace()
    xi = se3_log(cfg.initial_transform)
    for it in range(1, cfg.max_iters + 1):
        E = prob.energy(xi, None)
        xi_next = gauss_newton_step(prob.correspondences(xi, None), xi)
        dT = float(np.linalg.norm(se3_exp(xi).matrix() - se3_exp(xi_next).matrix()))
        trace.append(TraceRecord(0, it, math.nan, E, PLAIN, dT, 1e3 * (time.perf_counter() - t0)))
        xi = xi_next
        if dT < cfg.trans_eps:
            break
    else:
        notes.append("iteration limit reached")
    T = se3_exp(xi)
    return RegistrationReport(
        method="icp-pl",
        final_transform=T,
        trace=trace,
        iterations=len(trace),
        wall_time_seconds=time.perf_counter() - t0,
        rmse=_rmse(P, T, ground_truth),
        convergence=f"||dT||_F < {cfg.trans_eps:g} or {cfg.max_iters} iterations",
        notes=notes,
    )
