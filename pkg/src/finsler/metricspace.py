"""The quasi-distance of a Finsler model, its axioms, metric balls and Cauchy probes.

Distances are upper bounds: the length of the best curve found.  Minkowski
models use the closed form F(q - p) (straight lines are minimizing).  Other
models are seeded by Dijkstra on a lattice graph with directed edge weights
F(midpoint, edge) and refined by shooting: exp_p(v) = q is solved with a
damped Gauss-Newton iteration whose Jacobian is dexp.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import permutations, product
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .geodesic import ChartExitError, Trajectory, curve_length, geodesic_ivp, jacobi_field
from .models import Box, Disk, FinslerModel
from .ode import StepSizeError

__all__ = ["QuasiDistanceResult", "quasi_distance", "distance_matrix", "AxiomReport",
           "check_quasi_metric_axioms", "BallResult", "ball", "CauchyReport", "cauchy_probe",
           "LatticeGraph", "lattice_graph"]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class QuasiDistanceResult:
    """Upper bound ``value`` on rho(p, q) with the curve that realizes it.

    ``gap`` bounds the numerical inconsistency between ``value`` and the
    witness length; it is not an optimality certificate.
    """

    value: float
    witness: object
    method: str
    gap: float
    converged: bool = True
    graph_value: Optional[float] = None
    iterations: int = 0

    def to_json(self) -> dict:
        return {"value": self.value, "gap": self.gap, "method": self.method,
                "converged": self.converged}


# lattice graph --------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeGraph:
    points: np.ndarray
    matrix: object = field(repr=False)


def _stencil(n: int) -> np.ndarray:
    offs = np.array([o for o in product((-1, 0, 1), repeat=n) if any(o)])
    return offs


def _directed_weights(model: FinslerModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    e = b - a
    if model.x_independent:
        return model.F(a, e)
    return model.F(0.5 * (a + b), e)


def lattice_graph(model: FinslerModel, lower, upper, resolution: int,
                  extra: Sequence[np.ndarray] = ()) -> LatticeGraph:
    """Directed 8- (2D) or 26-neighbour (3D) lattice on the box [lower, upper].

    Nodes outside the chart are dropped.  ``extra`` points are appended and
    linked both ways to lattice nodes within 1.5 cells.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = model.n
    axes = [np.linspace(lower[i], upper[i], resolution) for i in range(n)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    shape = mesh.shape[:-1]
    idx = np.arange(np.prod(shape)).reshape(shape)
    src, dst = [], []
    for off in _stencil(n):
        sl_from = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape))
        sl_to = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape))
        src.append(idx[sl_from].ravel())
        dst.append(idx[sl_to].ravel())
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    pts = mesh.reshape(-1, n)
    inside = np.asarray(model.chart.contains(pts), dtype=bool)
    keep = inside[src] & inside[dst]
    src, dst = src[keep], dst[keep]
    cell = (upper - lower) / (resolution - 1)
    extra = [np.asarray(e, dtype=float) for e in extra]
    base = len(pts)
    for k, e in enumerate(extra):
        near = np.where(inside & np.all(np.abs(pts - e) <= 1.5 * cell + 1e-15, axis=1))[0]
        node = np.full(len(near), base + k)
        src = np.concatenate([src, node, near])
        dst = np.concatenate([dst, near, node])
    allpts = np.concatenate([pts] + [e[None] for e in extra]) if extra else pts
    w = _directed_weights(model, allpts[src], allpts[dst])
    # zero-length edges would be read as missing by csgraph
    w = np.maximum(w, 1e-300)
    N = len(allpts)
    mat = coo_matrix((w, (src, dst)), shape=(N, N)).tocsr()
    return LatticeGraph(allpts, mat)


def _bounds_for(model: FinslerModel, pts: np.ndarray, pad: float = 1.0):
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    ext = max(float(np.max(hi - lo)), 1e-3)
    lo = lo - pad * ext
    hi = hi + pad * ext
    chart = model.chart
    if isinstance(chart, Box):
        lo = np.maximum(lo, chart.lower)
        hi = np.minimum(hi, chart.upper)
    elif isinstance(chart, Disk):
        c = np.asarray(chart.center, dtype=float)
        lo = np.maximum(lo, c - chart.radius)
        hi = np.minimum(hi, c + chart.radius)
    return lo, hi


def _default_resolution(n: int) -> int:
    return 61 if n == 2 else 17


def graph_distance(model: FinslerModel, p, q, resolution: Optional[int] = None):
    """Dijkstra upper bound and its polyline between p and q."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    res = resolution or _default_resolution(model.n)
    lo, hi = _bounds_for(model, np.stack([p, q]))
    g = lattice_graph(model, lo, hi, res, extra=[p, q])
    ip, iq = len(g.points) - 2, len(g.points) - 1
    dist, pred = dijkstra(g.matrix, directed=True, indices=ip, return_predecessors=True)
    if not np.isfinite(dist[iq]):
        return np.inf, None
    path = [iq]
    while path[-1] != ip:
        path.append(pred[path[-1]])
    poly = g.points[path[::-1]]
    return float(curve_length(model, poly)), poly


# shooting -------------------------------------------------------------------------


def _initial_velocity(model: FinslerModel, p, poly, length):
    # aim at a point a little way along the seed path
    k = min(len(poly) - 1, max(1, len(poly) // 4))
    d = poly[k] - p
    if not np.any(d):
        d = poly[-1] - p
    f = float(model.F(p, d))
    return d * (length / f)


def _shoot(model, p, q, v0, tol, max_iter, target, fresh_jacobian=False, J=None):
    """Damped Gauss-Newton on exp_p(v) = q.

    With ``fresh_jacobian`` dexp is recomputed at every iterate; otherwise a
    given ``J`` is reused as a chord and refreshed only when a step fails.  Returns (v, traj, residual, iterations, J).
    """

    def evaluate(v):
        try:
            traj = geodesic_ivp(model, p, v, 1.0, tol)
        except StepSizeError:
            return None, np.inf
        if traj.exited:
            return None, np.inf
        return traj, float(np.linalg.norm(traj.endpoint - q))

    def jacobian(traj):
        # LM only needs a rough Jacobian: reuse the geodesic just integrated, no refinement
        n = model.n
        return jacobi_field(model, traj, np.zeros((n, n)), np.eye(n), tol=np.inf).J[-1]

    v = np.asarray(v0, dtype=float)
    traj, r = evaluate(v)
    if traj is None:
        return v, None, np.inf, 0, J
    mu = 1e-3 if fresh_jacobian else 1e-9
    it = 0
    fresh = False
    for it in range(1, max_iter + 1):
        if r <= target:
            break
        if J is None or fresh_jacobian:
            try:
                J = jacobian(traj)
            except (ChartExitError, StepSizeError):
                break
            fresh = True
        res = traj.endpoint - q
        JTJ = J.T @ J
        g = J.T @ res
        improved = False
        for _ in range(12):
            step = np.linalg.solve(JTJ + mu * np.diag(np.diag(JTJ) + 1e-12), -g)
            v_try = v + step
            if not np.any(v_try):
                mu *= 4
                continue
            traj_try, r_try = evaluate(v_try)
            if r_try < r:
                v, traj, r = v_try, traj_try, r_try
                mu = max(mu / 3, 1e-12)
                improved = True
                break
            mu *= 4
            if not fresh:
                break
        if not improved:
            if fresh:
                break
            J = None
        fresh = False
    return v, traj, r, it, J


def _shoot_continued(model, p, q, v0, tol, max_iter):
    """Converge at a cheap tolerance first, then polish at ``tol`` with a chord Jacobian."""
    scale = 1.0 + float(np.max(np.abs(q)))
    target = 10 * tol * scale
    coarse = max(tol, 1e-6)
    if coarse == tol:
        v, traj, r, it, _ = _shoot(model, p, q, v0, tol, max_iter, target, fresh_jacobian=True)
        return v, traj, r, it, target
    v, traj, r, it1, J = _shoot(model, p, q, v0, coarse, max_iter, 10 * coarse * scale,
                                    fresh_jacobian=True)
    if traj is not None:
        v0 = v
    v, traj, r, it2, _ = _shoot(model, p, q, v0, tol, max_iter, target, J=J)
    return v, traj, r, it1 + it2, target


def quasi_distance(model: FinslerModel, p, q, tol: float = 1e-10, resolution: Optional[int] = None,
                   max_iter: int = 40) -> QuasiDistanceResult:
    """Upper bound on rho_F(p, q) = inf over curves from p to q of the length."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for pt in (p, q):
        if pt.shape != (model.n,):
            raise ValueError(f"points must have shape ({model.n},)")
        if not bool(model.chart.contains(pt)):
            raise ChartExitError(f"point {pt} lies outside the chart of {model.name}")
    if np.array_equal(p, q):
        return QuasiDistanceResult(0.0, np.stack([p, q]), "closed-form", 0.0)
    if model.x_independent:
        val = float(model.F(p, q - p))
        return QuasiDistanceResult(val, np.stack([p, q]), "closed-form", 0.0)

    gval, poly = graph_distance(model, p, q, resolution)
    if poly is None:
        return QuasiDistanceResult(np.inf, None, "graph", np.inf, converged=False, graph_value=gval)
    v0 = _initial_velocity(model, p, poly, gval)
    v, traj, r, iters, target = _shoot_continued(model, p, q, v0, tol, max_iter)
    if traj is None or not np.isfinite(r):
        return QuasiDistanceResult(gval, poly, "graph", gval, converged=False, graph_value=gval,
                                   iterations=iters)
    speed = float(model.F(p, v))
    closing = float(model.F(traj.endpoint, q - traj.endpoint)) if np.any(traj.endpoint != q) else 0.0
    value = speed + closing
    converged = r <= target
    if value > gval:
        # the seed path is shorter than the geodesic found; keep it
        gap = 10 * tol * max(1.0, gval) if converged else gval
        return QuasiDistanceResult(gval, poly, "graph", gap, converged=converged, graph_value=gval,
                                   iterations=iters)
    gap = closing + 10 * tol * max(1.0, value) + traj.drift(model)
    return QuasiDistanceResult(value, traj, "shooting", gap, converged=converged, graph_value=gval,
                               iterations=iters)


def distance_matrix(model: FinslerModel, points, tol: float = 1e-10) -> np.ndarray:
    """D[i, j] = rho(points[i], points[j])."""
    pts = np.asarray(points, dtype=float)
    K = len(pts)
    if model.x_independent:
        return model.F(pts[:, None, :], pts[None, :, :] - pts[:, None, :])
    D = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            if i != j:
                D[i, j] = quasi_distance(model, pts[i], pts[j], tol).value
    return D


# axioms ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AxiomReport:
    identity: float
    triangle: float
    positivity: float
    asymmetry: float
    triples: int


def check_quasi_metric_axioms(model: FinslerModel, points, triples=None, tol: float = 1e-10) -> AxiomReport:
    """Max violations of rho(p,p) = 0 and rho(p,s) <= rho(p,q) + rho(q,s).

    ``triples`` is an optional (T, 3) index array into ``points``; by
    default every ordered triple of distinct points is used.
    ``positivity`` is the smallest off-diagonal distance (should be > 0) and
    ``asymmetry`` the largest |rho(p,q) - rho(q,p)|, for information.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    if triples is None:
        triples = np.array(list(permutations(range(len(pts)), 3)))
    triples = np.asarray(triples, dtype=int)
    needed = sorted({(a, b) for t in triples for a, b in ((t[0], t[2]), (t[0], t[1]), (t[1], t[2]))})
    if model.x_independent:
        D = distance_matrix(model, pts)
    else:
        D = np.full((len(pts), len(pts)), np.nan)
        for a, b in needed:
            D[a, b] = 0.0 if a == b else quasi_distance(model, pts[a], pts[b], tol).value
    ident = max(float(quasi_distance(model, p, p, tol).value) for p in pts)
    viol = D[triples[:, 0], triples[:, 2]] - D[triples[:, 0], triples[:, 1]] - D[triples[:, 1], triples[:, 2]]
    off = [(a, b) for a, b in needed if a != b]
    pos = min(D[a, b] for a, b in off)
    asym = max((abs(D[a, b] - D[b, a]) for a, b in off if not np.isnan(D[b, a])), default=0.0)
    return AxiomReport(ident, float(np.max(viol)), float(pos), float(asym), len(triples))


# balls ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BallResult:
    center: np.ndarray
    radius: float
    direction: str
    grid: np.ndarray
    distances: np.ndarray
    mask: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.grid[self.mask]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.grid.shape[1]
        w.writerow([f"x{i}" for i in range(n)] + ["distance", "inside"])
        for x, d, m in zip(self.grid, self.distances, self.mask):
            w.writerow([_fmt(v) for v in x] + [_fmt(d), int(m)])
        return buf.getvalue()


def ball(model: FinslerModel, center, r: float, direction: str = "forward", resolution: Optional[int] = None,
         bounds=None) -> BallResult:
    """Lattice points with rho(center, x) < r (forward) or rho(x, center) < r (backward).

    Minkowski models use the closed form; others use lattice-graph
    distances (an upper bound, so the returned set is an inner estimate).
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    a = np.asarray(center, dtype=float)
    res = resolution or _default_resolution(model.n)
    if bounds is None:
        lo, hi = _bounds_for(model, np.stack([a - 1.5 * r, a + 1.5 * r]), pad=0.0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if model.x_independent:
        axes = [np.linspace(lo[i], hi[i], res) for i in range(model.n)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.n)
        if not np.any(np.all(grid == a, axis=1)):
            grid = np.concatenate([grid, a[None]])
        if direction == "forward":
            d = model.F(a, grid - a)
        else:
            d = model.F(grid, a - grid)
    else:
        g = lattice_graph(model, lo, hi, res, extra=[a])
        grid = g.points
        ia = len(grid) - 1
        mat = g.matrix if direction == "forward" else g.matrix.T.tocsr()
        d = dijkstra(mat, directed=True, indices=ia)
        inside = np.asarray(model.chart.contains(grid), dtype=bool)
        d = np.where(inside, d, np.inf)
    return BallResult(a, float(r), direction, grid, d, d < r)


# Cauchy probes --------------------------------------------------------------------


@dataclass(frozen=True)
class CauchyReport:
    is_cauchy_to_tol: bool
    converges_to: Optional[np.ndarray]
    thresholds: dict
    direction: str


def cauchy_probe(model: FinslerModel, sequence, direction: str = "forward",
                 levels: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6), min_tail: int = 2,
                 tol: float = 1e-10) -> CauchyReport:
    """Check the forward (rho(x_m, x_n) < eps for N <= m <= n) or backward
    (rho(x_n, x_m) < eps) Cauchy condition on a finite prefix.

    For each eps the smallest admissible N is recorded; the prefix passes if
    every level is reached with at least ``min_tail`` terms to spare.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    xs = np.asarray(sequence, dtype=float)
    K = len(xs)
    if K < 2:
        raise ValueError("need at least two terms")
    D = distance_matrix(model, xs, tol)
    if direction == "backward":
        D = D.T
    # tail[N] = max over N <= m < n of D[m, n]
    upper = np.triu(D, k=1)
    tail = np.zeros(K)
    for N in range(K - 2, -1, -1):
        tail[N] = max(tail[N + 1], float(np.max(upper[N, N + 1:])))
    thresholds = {}
    ok = True
    for eps in levels:
        # the last index is vacuous (no pairs after it)
        hits = np.where(tail[:-1] < eps)[0]
        N = int(hits[0]) if len(hits) else None
        thresholds[eps] = N
        if N is None or N > K - 1 - min_tail:
            ok = False
    limit = xs[-1].copy() if ok else None
    return CauchyReport(ok, limit, thresholds, direction)


def witness_length(model: FinslerModel, result: QuasiDistanceResult) -> float:
    w = result.witness
    if isinstance(w, Trajectory):
        return curve_length(model, w)
    return curve_length(model, np.asarray(w))
