"""Windowed Anderson acceleration for fixed-point iterations x <- G(x)."""

from __future__ import annotations

from collections import deque

import numpy as np


class AndersonWindow:
    """History of the last ``m + 1`` pairs ``(x, G(x))``.

    ``push_and_accelerate(x, g)`` records a new pair and returns

        g_k - sum_j theta_j (g_{k-j+1} - g_{k-j})

    where ``theta`` minimises ``|f_k - sum_j theta_j (f_{k-j+1} - f_{k-j})|``
    over the residuals ``f = g - x``. With a single stored pair the result is
    ``g`` itself.
    """

    def __init__(self, m: int = 5, rcond: float = 1e-14):
        if m < 0:
            raise ValueError("window size must be non-negative")
        self.m = m
        self.rcond = rcond
        self._x: deque[np.ndarray] = deque(maxlen=m + 1)
        self._g: deque[np.ndarray] = deque(maxlen=m + 1)
        self.last_theta = np.zeros(0)

    def __len__(self) -> int:
        return len(self._x)

    @property
    def dim(self) -> int | None:
        return len(self._x[0]) if self._x else None

    def residuals(self) -> list[np.ndarray]:
        return [g - x for x, g in zip(self._x, self._g)]

    def reset(self) -> AndersonWindow:
        self._x.clear()
        self._g.clear()
        self.last_theta = np.zeros(0)
        return self

    def push_and_accelerate(self, x, g) -> np.ndarray:
        x = np.array(x, dtype=float).ravel()
        g = np.array(g, dtype=float).ravel()
        if x.shape != g.shape:
            raise ValueError(f"x has {x.size} entries but G(x) has {g.size}")
        if self._x and x.size != self.dim:
            raise ValueError(f"expected vectors of length {self.dim}, got {x.size}")
        self._x.append(x)
        self._g.append(g)
        if len(self._x) == 1:
            self.last_theta = np.zeros(0)
            return g.copy()

        G = np.array(self._g).T
        F = G - np.array(self._x).T
        dF = np.diff(F, axis=1)[:, ::-1]
        dG = np.diff(G, axis=1)[:, ::-1]
        theta = self._solve(dF, F[:, -1])
        self.last_theta = theta
        return g - dG @ theta

    def _solve(self, dF: np.ndarray, f: np.ndarray) -> np.ndarray:
        # SVD-based least squares, dropping directions below rcond * s_max
        U, s, Vt = np.linalg.svd(dF, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return np.zeros(dF.shape[1])
        keep = s > self.rcond * s[0]
        return Vt[keep].T @ ((U[:, keep].T @ f) / s[keep])


def aa_push_and_accelerate(win: AndersonWindow, x, g) -> np.ndarray:
    return win.push_and_accelerate(x, g)


def aa_reset(win: AndersonWindow) -> AndersonWindow:
    return win.reset()
