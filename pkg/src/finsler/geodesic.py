"""Geodesics, exponential map, parallel transport and Jacobi fields.

Geodesics and parallel fields are integrated with an adaptive
Dormand-Prince pair.  The Jacobi equation, linear along a computed
geodesic, is integrated with 3-stage Gauss-Legendre collocation on the
geodesic's step grid, refined by step doubling where the dense geodesic
alone would leave the linear flow under-resolved (e.g. along an equator,
where the spray vanishes and the geodesic takes few long steps).

In coordinates, with ``N = N(c, c')`` and ``P = D_c J = J' + N J``, the
Jacobi equation ``D_c D_c J = H(c', J) c'`` reads::

    J' = -N J + P
    P' = M J - N P,        M^i_l = H^i_jkl c'^j c'^k
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .berwald import connection_data, nonlinear_connection, spray_coefficients
from .models import FinslerModel
from .ode import GL3_C, StepSizeError, dopri5, gl3_propagators, quintic_hermite

__all__ = [
    "ChartExitError", "StepSizeError", "Trajectory", "TransportedField", "JacobiField",
    "geodesic_ivp", "exp_map", "parallel_transport", "jacobi_field", "dexp", "dexp_matrix",
    "curve_length", "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-10


class ChartExitError(RuntimeError):
    """A geodesic left the coordinate chart before the requested time."""


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class Trajectory:
    """Accepted steps of a geodesic with quintic Hermite dense output."""

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    xddot: np.ndarray
    steps: int
    rejected: int
    max_error: float
    exited: bool
    tol: float
    model_name: str = ""
    interpolation_order: int = 5

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def endpoint(self) -> np.ndarray:
        return self.x[-1].copy()

    def state(self, t):
        """Interpolated (x, x') at time(s) ``t`` inside the integrated range."""
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t)
        if len(self.t) == 1:
            return (np.broadcast_to(self.x[0], flat.shape + (self.n,)).reshape(t.shape + (self.n,)),
                    np.broadcast_to(self.xdot[0], flat.shape + (self.n,)).reshape(t.shape + (self.n,)))
        lo, hi = min(self.t[0], self.t[-1]), max(self.t[0], self.t[-1])
        if np.any(flat < lo - 1e-12) or np.any(flat > hi + 1e-12):
            raise ValueError("time outside the integrated range")
        sign = 1.0 if self.t[-1] >= self.t[0] else -1.0
        k = np.clip(np.searchsorted(sign * self.t, sign * flat, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[k + 1] - self.t[k]
        s = (flat - self.t[k]) / h
        pos, vel = quintic_hermite(s, h, self.x[k], self.xdot[k], self.xddot[k],
                                   self.x[k + 1], self.xdot[k + 1], self.xddot[k + 1])
        return pos.reshape(t.shape + (self.n,)), vel.reshape(t.shape + (self.n,))

    def speeds(self, model: FinslerModel) -> np.ndarray:
        return model.F(self.x, self.xdot)

    def drift(self, model: FinslerModel) -> float:
        """max_t |F(x, x') - F(x(0), x'(0))| over the step nodes."""
        F = self.speeds(model)
        return float(np.max(np.abs(F - F[0])))

    def to_csv(self, model: Optional[FinslerModel] = None) -> str:
        n = self.n
        header = ["t"] + [f"x{i}" for i in range(n)] + [f"xdot{i}" for i in range(n)]
        if model is not None:
            header += ["F", "drift"]
            F = self.speeds(model)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for k in range(len(self.t)):
            row = [self.t[k], *self.x[k], *self.xdot[k]]
            if model is not None:
                row += [F[k], abs(F[k] - F[0])]
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def geodesic_ivp(model: FinslerModel, p, v, t_end: float = 1.0, tol: float = DEFAULT_TOL) -> Trajectory:
    """Solve x'' + 2 G(x, x') = 0 with x(0) = p, x'(0) = v.

    Leaving the chart truncates the trajectory and sets ``exited``.
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    n = model.n
    if p.shape != (n,) or v.shape != (n,):
        raise ValueError(f"p and v must have shape ({n},)")
    if not np.any(v):
        raise ValueError("initial velocity must be nonzero")
    if not (tol > 0):
        raise ValueError("tol must be positive")
    if not bool(model.chart.contains(p)):
        raise ChartExitError(f"start point {p} lies outside the chart of {model.name}")

    def rhs(_t, u):
        return np.concatenate([u[n:], -2.0 * spray_coefficients(model, (u[:n], u[n:]))])

    def inside(u):
        return bool(model.chart.contains(u[:n]))

    res = dopri5(rhs, 0.0, np.concatenate([p, v]), float(t_end), rtol=tol, atol=tol * 1e-2,
                 inside=inside)
    return Trajectory(t=res.t, x=res.y[:, :n], xdot=res.y[:, n:], xddot=res.f[:, n:],
                      steps=res.steps, rejected=res.rejected, max_error=res.max_error,
                      exited=res.stopped, tol=tol, model_name=model.name)


def exp_map(model: FinslerModel, p, v, tol: float = DEFAULT_TOL) -> np.ndarray:
    """exp_p(v) = c(1); exp_p(0) = p without integration."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        return p.copy()
    traj = geodesic_ivp(model, p, v, 1.0, tol)
    if traj.exited:
        raise ChartExitError(f"geodesic left the chart at t={traj.t_end:.6g} before t=1")
    return traj.endpoint


# linear flows along a trajectory --------------------------------------------------


def _refined_grid(traj: Trajectory, substeps: int) -> np.ndarray:
    t = traj.t
    if substeps == 1:
        return t.copy()
    frac = np.arange(substeps) / substeps
    inner = (t[:-1, None] + np.diff(t)[:, None] * frac[None, :]).ravel()
    return np.concatenate([inner, t[-1:]])


def _gl3_steps(model, traj, coeff, lo, h, level):
    nodes = (lo[:, None] + h[:, None] * GL3_C[None, :]).ravel()
    xs, vs = traj.state(nodes)
    A = coeff(connection_data(model, (xs, vs), level))
    return gl3_propagators(h, A.reshape((len(h), 3) + A.shape[-2:]))


def _linear_flow(model, traj, coeff, u0, substeps, level, tol=None, max_rounds=12):
    """Integrate u' = A(t) u along ``traj``; returns (times, u at times, A at times).

    The geodesic's step grid, split into ``substeps`` pieces, is refined by
    step doubling: a step is kept once its one-step propagator agrees with
    the product of its two half-step propagators to ``tol`` (default
    ``traj.tol``), and that product is used.  ``tol = inf`` skips the check.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    tol = traj.tol if tol is None else float(tol)
    grid = _refined_grid(traj, substeps)
    lo, h = grid[:-1], np.diff(grid)
    done_lo, done_phi = [], []
    for rnd in range(max_rounds):
        if not len(h):
            break
        full = _gl3_steps(model, traj, coeff, lo, h, level)
        if np.isinf(tol):
            done_lo.append(lo)
            done_phi.append(full)
            break
        half = (_gl3_steps(model, traj, coeff, lo + h / 2, h / 2, level)
                @ _gl3_steps(model, traj, coeff, lo, h / 2, level))
        err = np.max(np.abs(full - half), axis=(1, 2))
        ok = err <= tol * np.maximum(1.0, np.max(np.abs(full), axis=(1, 2)))
        if rnd == max_rounds - 1:
            ok[:] = True
        done_lo.append(lo[ok])
        done_phi.append(half[ok])
        lo, h = lo[~ok], h[~ok] / 2
        lo, h = np.concatenate([lo, lo + h]), np.concatenate([h, h])
    d = u0.shape[0]
    lo = np.concatenate(done_lo) if done_lo else np.zeros(0)
    order = np.argsort(lo, kind="stable")
    Phi = np.concatenate(done_phi)[order] if done_phi else np.zeros((0, d, d))
    grid = np.concatenate([lo[order], grid[-1:]])
    A_grid = coeff(connection_data(model, traj.state(grid), level))
    u = np.empty((len(grid),) + u0.shape)
    u[0] = u0
    for k in range(len(Phi)):
        u[k + 1] = Phi[k] @ u[k]
    return grid, u, A_grid


def _as_columns(w, n):
    w = np.asarray(w, dtype=float)
    if w.shape == (n,):
        return w[:, None], True
    if w.ndim == 2 and w.shape[0] == n:
        return w, False
    raise ValueError(f"vector(s) must have shape ({n},) or ({n}, m)")


@dataclass(frozen=True)
class TransportedField:
    """A parallel field X(t) along a geodesic, sampled on ``t``."""

    trajectory: Trajectory
    t: np.ndarray
    X: np.ndarray
    Xdot: np.ndarray = field(repr=False)
    tol: float = DEFAULT_TOL

    def at(self, t):
        return _cubic_hermite(self.t, self.X, self.Xdot, t)

    def F_values(self, model: FinslerModel) -> np.ndarray:
        xs, _ = self.trajectory.state(self.t)
        return model.F(xs, self.X)

    def drift(self, model: FinslerModel) -> float:
        F = self.F_values(model)
        return float(np.max(np.abs(F - F[0])))

    def self_check(self, model: FinslerModel) -> float:
        """Max deviation from an independent integration at 100x tighter tolerance."""
        fine = parallel_transport(model, self.trajectory, self.X[0], tol=self.tol * 1e-2)
        return float(np.max(np.abs(fine.at(self.t) - self.X)))


def _cubic_hermite(ts, U, dU, t):
    t = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t)
    if len(ts) == 1:
        return np.broadcast_to(U[0], flat.shape + U.shape[1:]).reshape(t.shape + U.shape[1:])
    sign = 1.0 if ts[-1] >= ts[0] else -1.0
    k = np.clip(np.searchsorted(sign * ts, sign * flat, side="right") - 1, 0, len(ts) - 2)
    h = ts[k + 1] - ts[k]
    s = (flat - ts[k]) / h
    ext = (slice(None),) + (None,) * (U.ndim - 1)
    s, h = s[ext], h[ext]
    h00 = 2 * s ** 3 - 3 * s ** 2 + 1
    h10 = s ** 3 - 2 * s ** 2 + s
    h01 = -2 * s ** 3 + 3 * s ** 2
    h11 = s ** 3 - s ** 2
    out = h00 * U[k] + h10 * h * dU[k] + h01 * U[k + 1] + h11 * h * dU[k + 1]
    return out.reshape(t.shape + U.shape[1:])


def parallel_transport(model: FinslerModel, traj: Trajectory, w0,
                       tol: Optional[float] = None) -> TransportedField:
    """Horizontal transport X' + N(c, X) c' = 0 with X(0) = w0.

    ``X`` is a horizontal curve in TM, so F(c, X) is a first integral.  On
    Berwald models this is the linear transport X' + Gamma(c')(c', X) = 0.
    ``w0`` may hold several columns, transported independently.
    """
    n = model.n
    tol = traj.tol if tol is None else float(tol)
    W, single = _as_columns(w0, n)
    if np.any(np.all(W == 0.0, axis=0)):
        raise ValueError("transported vectors must be nonzero")
    if model.x_independent:
        grid = traj.t.copy()
        X = np.broadcast_to(W, (len(grid),) + W.shape).copy()
        dX = np.zeros_like(X)
    else:
        def rhs(t, u):
            c, cdot = traj.state(t)
            Xc = u.reshape(n, -1).T
            N = nonlinear_connection(model, (np.broadcast_to(c, Xc.shape), Xc))
            return -np.einsum("mij,j->im", N, cdot).ravel()

        res = dopri5(rhs, traj.t[0], W.ravel(), traj.t_end, rtol=tol, atol=tol * 1e-2)
        grid = res.t
        X = res.y.reshape(len(grid), n, -1)
        dX = res.f.reshape(len(grid), n, -1)
    if single:
        X, dX = X[..., 0], dX[..., 0]
    return TransportedField(traj, grid, X, dX, tol)


@dataclass(frozen=True)
class JacobiField:
    """J(t) and D_c J(t) along a geodesic, sampled on ``t``."""

    trajectory: Trajectory
    t: np.ndarray
    J: np.ndarray
    DJ: np.ndarray
    Jdot: np.ndarray = field(repr=False)
    substeps: int = 1
    model: Optional[FinslerModel] = field(default=None, repr=False, compare=False)

    @property
    def end(self) -> np.ndarray:
        return self.J[-1].copy()

    def at(self, t):
        """J at time(s) ``t``: one collocation step from the preceding node.

        Without a model this falls back to cubic Hermite interpolation.
        """
        if self.model is None or len(self.t) == 1:
            return _cubic_hermite(self.t, self.J, self.Jdot, t)
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t)
        sign = 1.0 if self.t[-1] >= self.t[0] else -1.0
        k = np.clip(np.searchsorted(sign * self.t, sign * flat, side="right") - 1, 0, len(self.t) - 2)
        Phi = _gl3_steps(self.model, self.trajectory, _jacobi_coeff, self.t[k], flat - self.t[k], "H")
        U = np.concatenate([self.J[k], self.DJ[k]], axis=1)
        n = self.J.shape[1]
        out = np.einsum("qij,qj...->qi...", Phi, U)[:, :n]
        return out.reshape(t.shape + self.J.shape[1:])


def _jacobi_coeff(cd):
    N = cd.N
    v = cd.site.y
    M = np.einsum("...ijkl,...j,...k->...il", cd.H, v, v)
    n = N.shape[-1]
    A = np.zeros(N.shape[:-2] + (2 * n, 2 * n))
    A[..., :n, :n] = -N
    A[..., :n, n:] = np.eye(n)
    A[..., n:, :n] = M
    A[..., n:, n:] = -N
    return A


def jacobi_field(model: FinslerModel, traj: Trajectory, J0, J0dot, substeps: int = 1,
                 tol: Optional[float] = None) -> JacobiField:
    """Jacobi field with J(0) = J0 and D_c J(0) = J0dot along ``traj``.

    ``J0`` and ``J0dot`` may be (n,) vectors or (n, m) matrices of columns.
    ``tol`` bounds the local propagator error (default ``traj.tol``).
    """
    n = model.n
    U0a, single = _as_columns(J0, n)
    U0b, single_b = _as_columns(J0dot, n)
    if U0a.shape != U0b.shape:
        raise ValueError("J0 and J0dot must have matching shapes")
    U0 = np.concatenate([U0a, U0b], axis=0)
    grid, U, A = _linear_flow(model, traj, _jacobi_coeff, U0, substeps, "H", tol)
    dU = A @ U
    J, P, Jdot = U[:, :n], U[:, n:], dU[:, :n]
    if single and single_b:
        J, P, Jdot = J[..., 0], P[..., 0], Jdot[..., 0]
    return JacobiField(traj, grid, J, P, Jdot, substeps, model)


def dexp(model: FinslerModel, p, v, w, tol: float = DEFAULT_TOL, substeps: int = 1) -> np.ndarray:
    """(exp_p)_* at v applied to w, as J(1) with J(0) = 0, D_c J(0) = w."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if not np.any(v):
        return w.copy()
    traj = geodesic_ivp(model, p, v, 1.0, tol)
    if traj.exited:
        raise ChartExitError(f"geodesic left the chart at t={traj.t_end:.6g} before t=1")
    return jacobi_field(model, traj, np.zeros_like(w), w, substeps).end


def dexp_matrix(model: FinslerModel, p, v, tol: float = DEFAULT_TOL, substeps: int = 1,
                return_endpoint: bool = False):
    """Jacobian matrix of exp_p at v (columns are dexp of the basis vectors)."""
    n = model.n
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        return (np.eye(n), p.copy()) if return_endpoint else np.eye(n)
    traj = geodesic_ivp(model, p, v, 1.0, tol)
    if traj.exited:
        raise ChartExitError(f"geodesic left the chart at t={traj.t_end:.6g} before t=1")
    D = jacobi_field(model, traj, np.zeros((n, n)), np.eye(n), substeps).J[-1]
    return (D, traj.endpoint) if return_endpoint else D


# length ---------------------------------------------------------------------------


def curve_length(model: FinslerModel, curve, epsabs: float = 1e-13, epsrel: float = 1e-12) -> float:
    """Length of a Trajectory or of a polyline given as a (K, n) array of points."""
    if isinstance(curve, Trajectory):
        total = 0.0
        for a, b in zip(curve.t[:-1], curve.t[1:]):
            val, _ = integrate.quad(lambda s: float(model.F(*curve.state(s))), a, b,
                                    epsabs=epsabs, epsrel=epsrel, limit=200)
            total += abs(val)
        return total
    pts = np.asarray(curve, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != model.n:
        raise ValueError(f"polyline must have shape (K, {model.n})")
    d = np.diff(pts, axis=0)
    if model.x_independent:
        return float(np.sum(model.F(pts[:-1], d)))
    total = 0.0
    for a, e in zip(pts[:-1], d):
        if not np.any(e):
            continue
        val, _ = integrate.quad(lambda s: float(model.F(a + s * e, e)), 0.0, 1.0,
                                epsabs=epsabs, epsrel=epsrel, limit=200)
        total += val
    return total
