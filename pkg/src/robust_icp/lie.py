"""Rigid transforms in SE(3) and their twist coordinates in se(3).

A twist is stored as a flat 6-vector ``(delta, u)``: ``delta`` is the rotation
generator (axis times angle) and ``u`` the translation generator, i.e. the
free entries of the 4x4 Lie-algebra matrix ``[[hat(delta), u], [0, 0]]``.

The logarithm is computed from a real Schur decomposition of the homogeneous
matrix, so rotations by exactly pi (negative real eigenvalues) are handled
without special casing.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

# Rotation angles below this are treated as zero.
ANGLE_EPS = 1e-12
# Below this angle the Schur factors cannot separate the rotation plane from
# the eigenvalue-1 cluster (which may be defective and spread by ~sqrt(eps)).
_SCHUR_MIN_ANGLE = 1e-6
# orthogonality tolerance of RigidTransform; from_matrix snaps up to _SNAP_TOL
_ORTHO_TOL = 1e-6
_SNAP_TOL = 1e-3
_I3 = np.eye(3)


class SchurLayoutError(ValueError):
    """The Schur factors do not have the layout of a rigid transform."""


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    """Inverse of :func:`hat`; uses the skew part of ``S``."""
    S = np.asarray(S, dtype=float)
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def _det3(R: np.ndarray) -> float:
    a, b, c = R.tolist()
    return (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]))


@dataclass(frozen=True)
class Twist:
    delta: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float).reshape(3))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, xi) -> Twist:
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.delta, self.u])

    def matrix(self) -> np.ndarray:
        """4x4 se(3) matrix form."""
        X = np.zeros((4, 4))
        X[:3, :3] = hat(self.delta)
        X[:3, 3] = self.u
        return X

    def __array__(self, dtype=None, copy=None):
        return self.vector if dtype is None else self.vector.astype(dtype)


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        R = self.R
        if not (np.isfinite(R).all() and np.isfinite(self.t).all()):
            raise ValueError("transform has non-finite entries")
        if np.abs(R.T @ R - _I3).max() > _ORTHO_TOL or _det3(R) <= 0.0:
            raise ValueError("R is not a rotation matrix")

    @classmethod
    def _unchecked(cls, R: np.ndarray, t: np.ndarray) -> RigidTransform:
        # for rotations that are orthogonal by construction
        T = object.__new__(cls)
        object.__setattr__(T, "R", R)
        object.__setattr__(T, "t", t)
        return T

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> RigidTransform:
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {T.shape}")
        if np.abs(T[3] - [0.0, 0.0, 0.0, 1.0]).max() > 1e-12:
            raise ValueError("last row of a rigid transform must be 0 0 0 1")
        R = T[:3, :3]
        err = np.abs(R.T @ R - np.eye(3)).max() if np.all(np.isfinite(R)) else math.inf
        if 1e-12 < err <= _SNAP_TOL:
            # snap rotations read from low-precision text onto SO(3)
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        return cls(R, T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points) -> np.ndarray:
        """Apply to a single 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` after ``other``."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    __matmul__ = compose

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.R
        return (
            np.linalg.norm(R.T @ R - np.eye(3)) < tol
            and abs(np.linalg.det(R) - 1.0) < tol
            and bool(np.all(np.isfinite(self.t)))
        )

    def rotation_angle(self) -> float:
        (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = self.R.tolist()
        c = 0.5 * (r00 + r11 + r22 - 1.0)
        s = 0.5 * math.sqrt((r21 - r12) ** 2 + (r02 - r20) ** 2 + (r10 - r01) ** 2)
        return math.atan2(s, c)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def apply(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def _exp_coefficients(theta: float) -> tuple[float, float, float]:
    # sin(x)/x, (1 - cos x)/x^2, (x - sin x)/x^3
    if theta < 1e-4:
        t2 = theta * theta
        return (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float).reshape(3)
    K = hat(delta)
    a, b, _ = _exp_coefficients(math.hypot(*delta.tolist()))
    return _I3 + a * K + b * (K @ K)


def se3_exp(xi) -> RigidTransform:
    """Closed-form (Rodrigues) matrix exponential of a twist."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    if not np.isfinite(xi).all():
        raise ValueError("twist has non-finite entries")
    x, y, z = xi[:3].tolist()
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    K2 = K @ K
    a, b, c = _exp_coefficients(math.sqrt(x * x + y * y + z * z))
    R = _I3 + a * K + b * K2
    V = _I3 + b * K + c * K2
    return RigidTransform._unchecked(R, V @ xi[3:])


def _rotation_plane_selector(angle: float):
    # Eigenvalues e^{+-i angle} sit at distance 2 sin(angle/2) from 1; the
    # remaining ones cluster at 1. Select anything farther than half that.
    radius = np.sin(0.5 * angle)

    def select(re, im):
        return (re - 1.0) ** 2 + im**2 > radius**2

    return select


def real_schur(T: RigidTransform, angle: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Real Schur factors of ``T.matrix()`` with the rotation block leading."""
    select = _rotation_plane_selector(T.rotation_angle() if angle is None else angle)
    # LAPACK directly: the scipy.linalg.schur wrapper dominates the cost on 4x4 input
    U, _, _, _, Q, _, info = scipy.linalg.lapack.dgees(select, T.matrix(), sort_t=1)
    if info < 0:
        raise ValueError(f"dgees: illegal argument {-info}")
    if info > 0:
        raise SchurLayoutError(f"dgees failed (info={info})")
    return Q, U


def block_rearrange(schur_Q, schur_U, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Bring real Schur factors of a rigid transform into ``Q' U' Q'^T`` form.

    ``Q'`` is ``diag(Q1, 1)`` with ``Q1`` orthogonal and ``U'`` is
    ``[[D, y], [0, 1]]`` with ``D = diag(D1, 1)``, ``D1`` a 2x2 rotation by
    an angle in ``[0, pi]``. The factors must have the non-unit eigenvalues
    (the rotation plane) in the leading 2x2 block, as :func:`real_schur`
    produces; if the leading block has unit eigenvalues the rotation is
    taken to be the identity.
    """
    Q = np.asarray(schur_Q, dtype=float)
    U = np.asarray(schur_U, dtype=float)
    T = Q @ U @ Q.T
    r0, r1, r2, r3 = T[3].tolist()
    if max(abs(r0), abs(r1), abs(r2), abs(r3 - 1.0)) > tol:
        raise SchurLayoutError("factors do not reconstruct a homogeneous transform")

    lead = U[:2, :2]
    (a, b), (c, d) = lead.tolist()
    half_tr = 0.5 * (a + d)
    root = cmath.sqrt(half_tr * half_tr - (a * d - b * c))
    if max(abs(half_tr + root - 1.0), abs(half_tr - root - 1.0)) <= tol:
        # no rotation plane: Q' = I, U' = T
        return np.eye(4), T
    (a0, b0), (a1, b1), (a2, b2), (a3, b3) = Q[:, :2].tolist()
    if max(abs(a3), abs(b3)) > tol:
        raise SchurLayoutError("leading Schur vectors leave the homogeneous row")
    # Gram-Schmidt on the two plane vectors, third axis by the cross product
    n = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
    a0, a1, a2 = a0 / n, a1 / n, a2 / n
    p = a0 * b0 + a1 * b1 + a2 * b2
    b0, b1, b2 = b0 - p * a0, b1 - p * a1, b2 - p * a2
    n = math.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
    if c - b < 0.0:
        # negative angle: flip the second basis vector
        n = -n
    b0, b1, b2 = b0 / n, b1 / n, b2 / n
    Qp = np.array([
        [a0, b0, a1 * b2 - a2 * b1, 0.0],
        [a1, b1, a2 * b0 - a0 * b2, 0.0],
        [a2, b2, a0 * b1 - a1 * b0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    Up = Qp.T @ T @ Qp
    # exact zeros and ones where the block structure forces them
    Up[3, :] = (0.0, 0.0, 0.0, 1.0)
    Up[2, :3] = (0.0, 0.0, 1.0)
    Up[:2, 2] = 0.0
    return Qp, Up


def _block_angle(D1: np.ndarray) -> float:
    return float(np.arctan2(0.5 * (D1[1, 0] - D1[0, 1]), 0.5 * (D1[0, 0] + D1[1, 1])))


def log_upper(Up) -> np.ndarray:
    """Logarithm of ``U' = [[D, y], [0, 1]]`` as a 4x4 se(3) matrix."""
    Up = np.asarray(Up, dtype=float)
    theta = _block_angle(Up[:2, :2])
    y = Up[:3, 3]
    L = np.zeros((4, 4))
    if abs(theta) <= ANGLE_EPS:
        L[:3, 3] = y
        return L
    # unit generator J = [[0, -1, 0], [1, 0, 0], [0, 0, 0]]; the log block is
    # theta * J and the translation is V y with V = I - theta/2 J + coef J^2
    # coef = 1 - theta sin(theta) / (2 (1 - cos(theta))) without the cancelling difference
    coef = 1.0 - 0.5 * theta / math.tan(0.5 * theta)
    y0, y1, y2 = y.tolist()
    L[1, 0], L[0, 1] = theta, -theta
    L[0, 3] = (1.0 - coef) * y0 + 0.5 * theta * y1
    L[1, 3] = (1.0 - coef) * y1 - 0.5 * theta * y0
    L[2, 3] = y2
    return L


def _log_small_angle(T: RigidTransform) -> np.ndarray:
    # Series form for rotations too small for the Schur split.
    w = vee(T.R)
    s = float(np.linalg.norm(w))
    theta = np.arcsin(min(s, 1.0))
    delta = w * (theta / s if s > 0.0 else 1.0)
    K = hat(delta)
    Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    return np.concatenate([delta, Vinv @ T.t])


def se3_log(T: RigidTransform) -> np.ndarray:
    """Twist ``(delta, u)`` with ``se3_exp(twist) == T`` and angle in [0, pi]."""
    angle = T.rotation_angle()
    if angle < _SCHUR_MIN_ANGLE:
        return _log_small_angle(T)
    Q, U = real_schur(T, angle)
    Qp, Up = block_rearrange(Q, U)
    L = log_upper(Up)
    # Q' L Q'^T: the rotation generator theta J maps to theta times the third axis
    delta = L[1, 0] * Qp[:3, 2]
    return np.concatenate([delta, Qp[:3, :3] @ L[:3, 3]])


def se3_exp_series(xi, terms: int = 30) -> np.ndarray:
    """Truncated power series of the matrix exponential (reference only)."""
    X = Twist.from_vector(xi).matrix()
    out = np.eye(4)
    term = np.eye(4)
    for i in range(1, terms + 1):
        term = term @ X / i
        out = out + term
    return out


def format_transform(T: RigidTransform) -> str:
    M = T.matrix()
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in M)


def parse_transform(text: str) -> RigidTransform:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise ValueError("transform must be 4 lines of 4 numbers")
    return RigidTransform.from_matrix(np.array(rows, dtype=float))


def load_transform(path) -> RigidTransform:
    return parse_transform(Path(path).read_text())


def save_transform(T: RigidTransform, path) -> None:
    Path(path).write_text(format_transform(T))
