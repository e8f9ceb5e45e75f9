"""Integrators: adaptive Dormand-Prince 5(4) and Gauss-Legendre linear flows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .jets import DomainError


class StepSizeError(RuntimeError):
    """The adaptive step size collapsed below the representable minimum."""


# Dormand & Prince (1980), with FSAL
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


@dataclass
class IntegrationResult:
    t: np.ndarray
    y: np.ndarray
    f: np.ndarray
    steps: int
    rejected: int
    max_error: float
    stopped: bool


def _rms(v):
    return float(np.sqrt(np.mean(v * v)))


def dopri5(f: Callable, t0: float, y0, t_end: float, rtol: float = 1e-10, atol: float = 1e-12,
           inside: Callable | None = None, max_steps: int = 200_000) -> IntegrationResult:
    """Integrate y' = f(t, y) from t0 to t_end.

    ``inside(y)`` is checked after each accepted step; the first state that
    fails it ends the integration (``stopped=True``) and is not recorded.
    ``max_error`` is the largest accepted scaled error estimate.
    """
    y = np.asarray(y0, dtype=float).copy()
    t = float(t0)
    direction = np.sign(t_end - t0) or 1.0
    fy = f(t, y)
    ts, ys, fs = [t], [y.copy()], [fy.copy()]

    scale = atol + rtol * np.abs(y)
    d0, d1 = _rms(y / scale), _rms(fy / scale)
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y + direction * h * fy
    d2 = _rms((f(t + direction * h, y1) - fy) / scale) / h
    h1 = max(1e-6, h * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h, h1, abs(t_end - t0))

    steps = rejected = 0
    max_err = 0.0
    stopped = False
    hmin_rel = 16 * np.finfo(float).eps
    while direction * (t_end - t) > 0:
        if steps + rejected >= max_steps:
            raise StepSizeError(f"step budget of {max_steps} exhausted at t={t}")
        h = min(h, abs(t_end - t))
        if h <= hmin_rel * max(1.0, abs(t)):
            raise StepSizeError(f"step size underflow at t={t}")
        hs = direction * h
        k = [fy]
        try:
            for i in range(1, 7):
                yi = y + hs * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
                k.append(f(t + _C[i] * hs, yi))
        except (DomainError, np.linalg.LinAlgError):
            rejected += 1
            h *= 0.25
            continue
        y_new = y + hs * sum(b * kj for b, kj in zip(_B, k) if b != 0.0)
        err_vec = hs * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(err_vec / sc)
        if not np.isfinite(err):
            rejected += 1
            h *= 0.25
            continue
        if err <= 1.0:
            if inside is not None and not inside(y_new):
                stopped = True
                break
            t = t_end if abs(t_end - (t + hs)) <= hmin_rel * max(1.0, abs(t_end)) else t + hs
            y, fy = y_new, k[6]
            ts.append(t)
            ys.append(y.copy())
            fs.append(fy.copy())
            steps += 1
            max_err = max(max_err, err)
            factor = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h *= factor
        else:
            rejected += 1
            h *= max(0.2, 0.9 * err ** -0.2)
    return IntegrationResult(np.array(ts), np.array(ys), np.array(fs), steps, rejected, max_err, stopped)


# quintic Hermite basis on [0, 1]: value, slope, curvature at each end


def _quintic_basis():
    rows = []
    for s, der in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]:
        row = []
        for p in range(6):
            if der == 0:
                row.append(float(s) ** p)
            elif der == 1:
                row.append(p * float(s) ** (p - 1) if p >= 1 else 0.0)
            else:
                row.append(p * (p - 1) * float(s) ** (p - 2) if p >= 2 else 0.0)
        rows.append(row)
    # columns of the inverse are monomial coefficients of each cardinal function
    return np.linalg.inv(np.array(rows))


_Q = _quintic_basis()


def quintic_hermite(s, h, p0, v0, a0, p1, v1, a1):
    """Position and velocity at fraction ``s`` of a step of length ``h``."""
    s = np.asarray(s, dtype=float)[..., None]
    pw = np.stack([np.ones_like(s), s, s ** 2, s ** 3, s ** 4, s ** 5], axis=0)
    dpw = np.stack([np.zeros_like(s), np.ones_like(s), 2 * s, 3 * s ** 2, 4 * s ** 3, 5 * s ** 4],
                   axis=0)
    basis = np.tensordot(_Q.T, pw, axes=(1, 0))
    dbasis = np.tensordot(_Q.T, dpw, axes=(1, 0))
    h = np.asarray(h, dtype=float)[..., None]
    data = [p0, h * v0, h * h * a0, p1, h * v1, h * h * a1]
    pos = sum(basis[i] * data[i] for i in range(6))
    vel = sum(dbasis[i] * data[i] for i in range(6)) / h
    return pos, vel


# Gauss-Legendre collocation (order 6) for linear systems u' = A(t) u

_R15 = np.sqrt(15.0)
GL3_C = np.array([0.5 - _R15 / 10, 0.5, 0.5 + _R15 / 10])
GL3_A = np.array([
    [5 / 36, 2 / 9 - _R15 / 15, 5 / 36 - _R15 / 30],
    [5 / 36 + _R15 / 24, 2 / 9, 5 / 36 - _R15 / 24],
    [5 / 36 + _R15 / 30, 2 / 9 + _R15 / 15, 5 / 36],
])
GL3_B = np.array([5 / 18, 4 / 9, 5 / 18])


def gl3_propagators(h, A_nodes) -> np.ndarray:
    """One-step transition matrices for u' = A(t) u.

    ``A_nodes`` has shape (steps, 3, d, d): A at the three Gauss nodes of
    each step; ``h`` has shape (steps,).  Returns (steps, d, d).
    """
    h = np.asarray(h, dtype=float)
    S, _, d, _ = A_nodes.shape
    M = np.zeros((S, 3 * d, 3 * d))
    for i in range(3):
        for j in range(3):
            M[:, i * d:(i + 1) * d, j * d:(j + 1) * d] = -h[:, None, None] * GL3_A[i, j] * A_nodes[:, i]
        M[:, i * d:(i + 1) * d, i * d:(i + 1) * d] += np.eye(d)
    rhs = A_nodes.reshape(S, 3 * d, d)
    K = np.linalg.solve(M, rhs).reshape(S, 3, d, d)
    return np.eye(d) + h[:, None, None] * np.einsum("i,sidk->sdk", GL3_B, K)
