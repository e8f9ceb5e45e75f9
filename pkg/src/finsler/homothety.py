"""Homotheties of Finsler models, Banach iteration, curvature equivariance and
the fixed-point-to-Minkowski verification pipeline.

A homothety satisfies F(phi(x), dphi(x) y) = lam F(x, y).  It acts on TM by
phi_*(x, y) = (phi(x), dphi(x) y) and on tangent vectors to TM by the
Jacobian of that map::

    phi_**(xi_x, xi_y) = (dphi xi_x, d2phi[xi_x, y] + dphi xi_y)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .berwald import TangentOfTM, connection_data, curvature_operator, flatness_test
from .geodesic import ChartExitError, dexp, exp_map, geodesic_ivp
from .jets import PointedVector
from .metricspace import quasi_distance
from .models import FinslerModel, get_model, metric_array

__all__ = [
    "HomothetyMap", "PreconditionError", "dilation", "translation", "rotation", "polar_shift",
    "linear_map", "shear", "compose", "conjugate", "verify_homothety", "check_jacobian",
    "FixedPointResult", "banach_fixed_point", "push_tangent", "curvature_equivariance",
    "DecayReport", "decay_chain_check", "check_geodesic_preservation", "TheoremConfig",
    "StageResult", "TheoremReport", "verify_theorem", "shipped_homotheties",
]


class PreconditionError(ValueError):
    """The supplied map does not meet the requirements of the operation."""


def _fd_d2(dphi: Callable, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    # central differences of the Jacobian: out[..., i, j, k] = d_k d_j phi^i
    n = x.shape[-1]
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        cols.append((dphi(x + e) - dphi(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class HomothetyMap:
    """A chart self-map with its first and second derivatives.

    ``d2phi(x)[..., i, j, k] = d_j d_k phi^i``; when omitted it falls back to
    central differences of ``dphi``.  ``inverse`` builds the inverse map.
    """

    name: str
    lam: float
    phi: Callable
    dphi: Callable
    d2phi: Optional[Callable] = None
    inverse_factory: Optional[Callable] = field(default=None, repr=False, compare=False)

    @property
    def is_proper(self) -> bool:
        return self.lam != 1.0

    @property
    def inverse(self) -> Optional["HomothetyMap"]:
        return self.inverse_factory() if self.inverse_factory is not None else None

    def __call__(self, x) -> np.ndarray:
        return self.phi(np.asarray(x, dtype=float))

    def jacobian(self, x) -> np.ndarray:
        return self.dphi(np.asarray(x, dtype=float))

    def hessian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.d2phi is not None:
            return self.d2phi(x)
        return _fd_d2(self.dphi, x)

    def push(self, x, y):
        """phi_*(x, y) = (phi(x), dphi(x) y)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.phi(x), np.einsum("...ij,...j->...i", self.dphi(x), y)


def _affine(A, b, lam, name, inv=None) -> HomothetyMap:
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    return HomothetyMap(
        name=name, lam=float(lam),
        phi=lambda x: np.einsum("ij,...j->...i", A, x) + b,
        dphi=lambda x: np.broadcast_to(A, np.shape(x)[:-1] + (n, n)).copy(),
        d2phi=lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)),
        inverse_factory=inv,
    )


def linear_map(L, lam: float = 1.0, name: str = "linear") -> HomothetyMap:
    """x -> L x, declared to scale F by ``lam`` (checked by verify_homothety)."""
    L = np.asarray(L, dtype=float)
    return _affine(L, np.zeros(L.shape[0]), lam, name,
                   inv=lambda: linear_map(np.linalg.inv(L), 1.0 / lam, name + "^-1"))


def dilation(lam: float, n: int = 2, center=None, linear=None) -> HomothetyMap:
    """x -> c + lam L (x - c) with L a linear isometry of the norm (default identity)."""
    if lam <= 0:
        raise ValueError("dilation factor must be positive")
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    L = np.eye(n) if linear is None else np.asarray(linear, dtype=float)
    A = lam * L
    b = c - A @ c
    name = (f"dilation({lam:g})" + ("" if center is None else f"@{tuple(float(v) for v in c)}")
            + ("" if linear is None else "*L"))
    Linv = np.linalg.inv(L)
    return _affine(A, b, lam, name,
                   inv=lambda: dilation(1.0 / lam, n, c, Linv))


def translation(t) -> HomothetyMap:
    t = np.asarray(t, dtype=float)
    n = len(t)
    return _affine(np.eye(n), t, 1.0, f"translation{tuple(float(v) for v in t)}",
                   inv=lambda: translation(-t))


def rotation(angle: float, center=(0.0, 0.0)) -> HomothetyMap:
    """Planar rotation; an isometry of the stereographic sphere and the Poincare disk about 0."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    ctr = np.asarray(center, dtype=float)
    return _affine(R, ctr - R @ ctr, 1.0, f"rotation({angle:g})",
                   inv=lambda: rotation(-angle, center))


def polar_shift(delta: float) -> HomothetyMap:
    """(colatitude, longitude) -> (colatitude, longitude + delta)."""
    return _affine(np.eye(2), np.array([0.0, delta]), 1.0, f"polar-shift({delta:g})",
                   inv=lambda: polar_shift(-delta))


def shear(k: float = 0.3) -> HomothetyMap:
    """A map that is not a homothety of any shipped curved model (negative control)."""
    return _affine(np.array([[1.0, k], [0.0, 1.0]]), np.zeros(2), 1.0, f"shear({k:g})",
                   inv=lambda: _affine(np.array([[1.0, -k], [0.0, 1.0]]), np.zeros(2), 1.0,
                                       f"shear({k:g})^-1"))


def compose(f: HomothetyMap, g: HomothetyMap) -> HomothetyMap:
    """f o g."""

    def phi(x):
        return f.phi(g.phi(x))

    def dphi(x):
        return np.einsum("...ij,...jk->...ik", f.dphi(g.phi(x)), g.dphi(x))

    def d2phi(x):
        gx = g.phi(x)
        Dg = g.dphi(x)
        return (np.einsum("...iab,...aj,...bk->...ijk", f.hessian(gx), Dg, Dg)
                + np.einsum("...ia,...ajk->...ijk", f.dphi(gx), g.hessian(x)))

    def inv():
        fi, gi = f.inverse, g.inverse
        return compose(gi, fi) if fi is not None and gi is not None else None

    return HomothetyMap(f"{f.name}o{g.name}", f.lam * g.lam, phi, dphi, d2phi, inv)


def conjugate(T: HomothetyMap, f: HomothetyMap) -> HomothetyMap:
    """T o f o T^-1."""
    Ti = T.inverse
    if Ti is None:
        raise ValueError("conjugating map has no inverse")
    return compose(T, compose(f, Ti))


# checks -----------------------------------------------------------------------------


def _sites(model: FinslerModel, phi: HomothetyMap, k: int, rng) -> PointedVector:
    s = model.sample_sites(rng, 4 * k, unit=True)
    keep = np.asarray(model.chart.contains(phi(s.x)), dtype=bool)
    if keep.sum() < 1:
        raise PreconditionError(f"{phi.name} maps no sampled site into the chart of {model.name}")
    return PointedVector(s.x[keep][:k], s.y[keep][:k])


def verify_homothety(model: FinslerModel, phi: HomothetyMap, k: int = 32, rng=None) -> float:
    """max |F(phi_* v) - lam F(v)| over ``k`` random unit sites."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    s = _sites(model, phi, k, rng)
    X, Y = phi.push(s.x, s.y)
    return float(np.max(np.abs(model.F(X, Y) - phi.lam * model.F(s.x, s.y))))


def check_jacobian(phi: HomothetyMap, points, h: float = 1e-6) -> float:
    """max |dphi - central FD of phi| at ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[-1]
    fd = np.stack([(phi(pts + h * e) - phi(pts - h * e)) / (2 * h) for e in np.eye(n)], axis=-1)
    return float(np.max(np.abs(fd - phi.jacobian(pts))))


@dataclass(frozen=True)
class FixedPointResult:
    p: np.ndarray
    iterations: int
    residual: float
    inverted: bool
    history: np.ndarray = field(repr=False)


def banach_fixed_point(model: FinslerModel, phi: HomothetyMap, x0, tol: float = 1e-10,
                       max_iter: int = 200, dist_tol: float = 1e-10) -> FixedPointResult:
    """Iterate x_{n+1} = phi(x_n) for a contraction (or its inverse if lam > 1).

    Stops once max(rho(x_n, x_n+1), rho(x_n+1, x_n)) < tol (1 - lam) / lam,
    which bounds the distance from x_{n+1} to the fixed point by ``tol`` in
    both directions.  ``residual`` is max(rho(p, phi p), rho(phi p, p)).
    """
    lam = phi.lam
    inverted = False
    if lam == 1.0:
        raise PreconditionError(f"{phi.name} has lam = 1 and is not a contraction")
    if lam > 1.0:
        inv = phi.inverse
        if inv is None:
            raise PreconditionError("lam > 1 and no inverse map is available")
        phi, lam, inverted = inv, inv.lam, True
    bound = tol * (1.0 - lam) / lam

    def rho2(a, b):
        return max(quasi_distance(model, a, b, dist_tol).value, quasi_distance(model, b, a, dist_tol).value)

    x = np.asarray(x0, dtype=float)
    if not bool(model.chart.contains(x)):
        raise ChartExitError(f"start point {x} lies outside the chart")
    hist = [x.copy()]
    for it in range(1, max_iter + 1):
        x_new = phi(x)
        if not bool(model.chart.contains(x_new)):
            raise ChartExitError(f"iterate {it} left the chart")
        hist.append(x_new.copy())
        step = rho2(x, x_new)
        x = x_new
        if step < bound:
            return FixedPointResult(x, it, rho2(x, phi(x)), inverted, np.array(hist))
    raise RuntimeError(f"no convergence in {max_iter} iterations")


def push_tangent(phi: HomothetyMap, z: TangentOfTM) -> TangentOfTM:
    """phi_** z at phi_*(z.x, z.y)."""
    D = phi.jacobian(z.x)
    D2 = phi.hessian(z.x)
    X, Y = phi.push(z.x, z.y)
    return TangentOfTM(X, Y, D @ z.xi_x, np.einsum("ijk,j,k->i", D2, z.xi_x, z.y) + D @ z.xi_y)


def _R(model, x, u, z1, z2, v):
    cd = connection_data(model, (x, u), "H")
    return curvature_operator(cd, z1, z2, v), cd


def curvature_equivariance(model: FinslerModel, phi: HomothetyMap, site, z1: TangentOfTM,
                           z2: TangentOfTM, v) -> float:
    """max_i |R_{phi_* u}(phi_** z1, phi_** z2) phi_* v - phi_* R_u(z1, z2) v|."""
    x, u = (site.x, site.y) if isinstance(site, PointedVector) else map(np.asarray, site)
    v = np.asarray(v, dtype=float)
    rhs, _ = _R(model, x, u, z1, z2, v)
    D = phi.jacobian(x)
    X, U = phi.push(x, u)
    lhs, _ = _R(model, X, U, push_tangent(phi, z1), push_tangent(phi, z2), D @ v)
    return float(np.max(np.abs(lhs - D @ rhs)))


def random_tangents(rng, site: PointedVector, count: int):
    """Random TangentOfTM vectors based at ``site``."""
    n = site.n
    return [TangentOfTM(site.x, site.y, rng.normal(size=n), rng.normal(size=n)) for _ in range(count)]


@dataclass(frozen=True)
class DecayReport:
    values: np.ndarray
    expected: np.ndarray
    residual: float
    passed: bool
    pairing: str


def decay_chain_check(model: FinslerModel, phi: HomothetyMap, site, z1: TangentOfTM, z2: TangentOfTM,
                      v, w, n_max: int = 5, pairing: str = "curvature", tol: float = 1e-7) -> DecayReport:
    """a_n = g_{phi^n u}(R(phi^n z1, phi^n z2) phi^n v, phi^n w) against lam^(2n) a_0.

    ``pairing="metric"`` replaces the curvature pairing by g(phi^n v, phi^n v).
    """
    if pairing not in ("curvature", "metric"):
        raise ValueError("pairing must be 'curvature' or 'metric'")
    x, u = (site.x, site.y) if isinstance(site, PointedVector) else map(np.asarray, site)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    vals = []
    for k in range(n_max + 1):
        if not bool(model.chart.contains(x)):
            raise ChartExitError(f"iterate {k} left the chart")
        g = metric_array(model, x, u)
        if pairing == "metric":
            vals.append(float(v @ g @ v))
        else:
            Rv, _ = _R(model, x, u, z1, z2, v)
            vals.append(float(Rv @ g @ w))
        if k == n_max:
            break
        D = phi.jacobian(x)
        z1, z2 = push_tangent(phi, z1), push_tangent(phi, z2)
        x, u = phi.push(x, u)
        v, w = D @ v, D @ w
    vals = np.array(vals)
    expected = phi.lam ** (2 * np.arange(n_max + 1)) * vals[0]
    res = float(np.max(np.abs(vals - expected)) / (1.0 + abs(vals[0])))
    return DecayReport(vals, expected, res, res < tol, pairing)


def check_geodesic_preservation(model: FinslerModel, phi: HomothetyMap, p, v, t_end: float = 1.0,
                                tol: float = 1e-10, samples: int = 21) -> float:
    """max |phi(c(t)) - c~(t)| where c~ starts at phi_*(p, v)."""
    c = geodesic_ivp(model, np.asarray(p, float), np.asarray(v, float), t_end, tol)
    P, V = phi.push(np.asarray(p, float), np.asarray(v, float))
    ct = geodesic_ivp(model, P, V, t_end, tol)
    T = min(c.t_end, ct.t_end)
    ts = np.linspace(0.0, T, samples)
    return float(np.max(np.abs(phi(c.state(ts)[0]) - ct.state(ts)[0])))


# theorem pipeline -----------------------------------------------------------------


@dataclass(frozen=True)
class TheoremConfig:
    samples: int = 16
    seed: int = 0
    x0: Optional[tuple] = None
    fixed_point_tol: float = 1e-8
    flatness_tol: float = 1e-7
    local_tol: float = 1e-6
    global_tol: float = 1e-4
    homothety_tol: float = 1e-8
    injectivity_delta: float = 1e-2
    radius: float = 1.0
    ode_tol: float = 1e-10


@dataclass(frozen=True)
class StageResult:
    name: str
    residual: float
    tolerance: Optional[float]
    passed: bool
    detail: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "residual": self.residual, "tolerance": self.tolerance,
                "pass": self.passed}


@dataclass(frozen=True)
class TheoremReport:
    model: str
    lam: float
    map_name: str
    stages: tuple
    fixed_point: Optional[np.ndarray]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.stages)

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "map": self.map_name,
            "lambda": self.lam,
            "fixed_point": None if self.fixed_point is None else [float(v) for v in self.fixed_point],
            "stages": [s.to_json() for s in self.stages],
            "pass": self.passed,
        }


def _tangent_samples(model, p, rng, k, radius):
    # random directions scaled to F(p, v) <= radius
    v = rng.normal(size=(k, model.n))
    v /= model.F(np.broadcast_to(p, v.shape), v)[:, None]
    return v * (radius * rng.uniform(0.1, 1.0, size=(k, 1)))


def verify_theorem(model: FinslerModel, phi: HomothetyMap, config: TheoremConfig = TheoremConfig()) -> TheoremReport:
    """Run the five-stage pipeline: fixed point, flatness, local and global
    isometry of exp_p, and injectivity of exp_p on sampled vectors.

    A map with lam = 1 or failing the defining identity is rejected at a
    precondition stage and no further stage runs.
    """
    rng = np.random.default_rng(config.seed)
    K = config.samples
    hres = verify_homothety(model, phi, max(K, 8), rng)
    pre_ok = phi.is_proper and hres < config.homothety_tol
    detail = "" if phi.is_proper else "lam = 1: not a proper homothety"
    pre = StageResult("precondition", hres, config.homothety_tol, pre_ok, detail)
    if not pre_ok:
        return TheoremReport(model.name, phi.lam, phi.name, (pre,), None)
    stages = [pre]

    # 1. fixed point
    x0 = (np.asarray(config.x0, dtype=float) if config.x0 is not None
          else model.sample_sites(rng, 1).x[0])
    try:
        fp = banach_fixed_point(model, phi, x0, tol=config.fixed_point_tol * 1e-2)
        stages.append(StageResult("fixed_point", fp.residual, config.fixed_point_tol,
                                  fp.residual < config.fixed_point_tol, f"{fp.iterations} iterations"))
        p = fp.p
    except (RuntimeError, ChartExitError, PreconditionError) as exc:
        stages.append(StageResult("fixed_point", float("inf"), config.fixed_point_tol, False, str(exc)))
        return TheoremReport(model.name, phi.lam, phi.name, tuple(stages), None)

    # 2. flatness near p and over the sampling region
    y = rng.normal(size=(K, model.n))
    near = PointedVector(np.broadcast_to(p, y.shape).copy(), y)
    r1 = flatness_test(model, near, tol=config.flatness_tol)
    r2 = flatness_test(model, k=K, rng=rng, tol=config.flatness_tol)
    flat_res = max(r1.max_residual, r2.max_residual)
    stages.append(StageResult("flatness", flat_res, config.flatness_tol, flat_res < config.flatness_tol))

    # 3. local isometry: F(exp_p v, dexp_v w) = F(p, w)
    V = _tangent_samples(model, p, rng, K, config.radius)
    W = rng.normal(size=(K, model.n))
    local = 0.0
    try:
        for v, w in zip(V, W):
            q = exp_map(model, p, v, config.ode_tol)
            dw = dexp(model, p, v, w, config.ode_tol)
            local = max(local, abs(float(model.F(q, dw)) - float(model.F(p, w))))
    except ChartExitError as exc:
        stages.append(StageResult("local_isometry", float("inf"), config.local_tol, False, str(exc)))
        return TheoremReport(model.name, phi.lam, phi.name, tuple(stages), p)
    stages.append(StageResult("local_isometry", local, config.local_tol, local < config.local_tol))

    # 4. global isometry: rho(exp_p v, exp_p w) = F(p, w - v)
    V2 = _tangent_samples(model, p, rng, K, config.radius)
    W2 = _tangent_samples(model, p, rng, K, config.radius)
    glob = 0.0
    images = []
    for v, w in zip(V2, W2):
        a, b = exp_map(model, p, v, config.ode_tol), exp_map(model, p, w, config.ode_tol)
        images.append((v, a))
        images.append((w, b))
        d = quasi_distance(model, a, b, config.ode_tol).value
        glob = max(glob, abs(d - float(model.F(p, w - v))))
    stages.append(StageResult("global_isometry", glob, config.global_tol, glob < config.global_tol))

    # 5. injectivity on the sampled vectors
    delta = config.injectivity_delta
    violations = 0
    closest = float("inf")
    for i in range(len(images)):
        for j in range(len(images)):
            if i == j:
                continue
            (v, a), (w, b) = images[i], images[j]
            if float(model.F(p, w - v)) <= delta:
                continue
            d = quasi_distance(model, a, b, config.ode_tol).value
            closest = min(closest, d)
            if d < delta / 2:
                violations += 1
    stages.append(StageResult("injectivity", float(violations), None, violations == 0,
                              f"closest separated pair {closest:.6g}"))
    return TheoremReport(model.name, phi.lam, phi.name, tuple(stages), p)


# shipped instances ----------------------------------------------------------------


def shipped_homotheties():
    """(model name, map) pairs whose defining identity holds exactly."""
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    cyc = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    c, s = np.cos(0.7), np.sin(0.7)
    return [
        ("euclidean-2", dilation(0.5, 2, center=(1.0, -1.0), linear=[[c, -s], [s, c]])),
        ("minkowski-quartic", dilation(0.5, 2)),
        ("minkowski-quartic", dilation(0.5, 2, linear=swap)),
        ("minkowski-quartic", translation((0.3, -0.2))),
        ("minkowski-quartic-3", dilation(0.5, 3, linear=cyc)),
        ("flat-randers", conjugate(translation((1.0, 2.0)), dilation(0.5, 2))),
        ("flat-randers", dilation(0.5, 2, linear=np.diag([1.0, -1.0]))),
        ("flat-randers", translation((0.3, -0.2))),
        ("s2-stereographic", rotation(0.8)),
        ("s2-polar", polar_shift(0.9)),
        ("hyperbolic-disk", rotation(1.1)),
    ]


def shipped_pairs():
    return [(get_model(name), phi) for name, phi in shipped_homotheties()]
