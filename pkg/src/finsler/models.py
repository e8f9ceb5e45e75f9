"""Finsler functions, their metric tensors, and a catalogue of model spaces.

Every model is a chart (box or disk) plus a program ``F2(x, y)`` written
against :mod:`finsler.jets` so that it can be expanded to any Taylor order.
Models can also be built from a JSON descriptor::

    {"family": "randers-flat", "dim": 2,
     "params": {"a": [[1, 0], [0, 1]], "b": [0.5, 0]},
     "chart": {"type": "box", "lower": [-5, -5], "upper": [5, 5]}}

The full schema ships as ``model_descriptor.schema.json`` next to this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from . import jets
from .jets import DomainError, PointedVector

#: minimum eigenvalue of g relative to its trace for a site to count as admissible
PD_THRESHOLD = 1e-8


# charts ------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    @property
    def n(self) -> int:
        return len(self.lower)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x > np.asarray(self.lower)) & (x < np.asarray(self.upper)), axis=-1)

    def margin(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.min(np.minimum(x - np.asarray(self.lower), np.asarray(self.upper) - x), axis=-1)

    def shrink(self, factor: float) -> "Box":
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * factor
        return Box(tuple(mid - half), tuple(mid + half))

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(k, self.n))

    def to_json(self) -> dict:
        return {"type": "box", "lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float

    @property
    def n(self) -> int:
        return len(self.center)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) < self.radius

    def margin(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)

    def shrink(self, factor: float) -> "Disk":
        return Disk(self.center, self.radius * factor)

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        d = rng.normal(size=(k, self.n))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = self.radius * rng.uniform(size=(k, 1)) ** (1.0 / self.n)
        return np.asarray(self.center) + r * d

    def to_json(self) -> dict:
        return {"type": "disk", "center": list(self.center), "radius": self.radius}


def chart_from_json(spec: dict):
    if spec["type"] == "box":
        return Box(tuple(map(float, spec["lower"])), tuple(map(float, spec["upper"])))
    return Disk(tuple(map(float, spec["center"])), float(spec["radius"]))


# models --------------------------------------------------------------------------


@dataclass(frozen=True)
class FinslerModel:
    """A Finsler function on a single chart, with known-answer metadata.

    ``x_independent`` marks Minkowski models (F depends on y only), for which
    straight lines are geodesics and distances have the closed form F(q - p).
    ``curvature`` is the constant sectional curvature of Riemannian space
    forms, else None.
    """

    name: str
    n: int
    chart: object
    F2: Callable
    is_riemannian: bool = False
    is_flat_expected: bool = False
    x_independent: bool = False
    curvature: Optional[float] = None
    metric_matrix: Optional[Callable] = None
    sample_region: object = None
    descriptor: Optional[dict] = None
    notes: str = ""
    embedding: Optional[Callable] = field(default=None, compare=False)

    def __repr__(self) -> str:
        return f"FinslerModel({self.name!r}, n={self.n})"

    def F2_value(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.asarray(self.F2([x[..., i] for i in range(self.n)],
                                  [y[..., i] for i in range(self.n)]), dtype=float)

    def F(self, x, y) -> np.ndarray:
        """Plain vectorised F without chart checks."""
        f2 = self.F2_value(x, y)
        return np.sqrt(np.maximum(f2, 0.0))

    def expand(self, x, y, orders=jets.DEFAULT_ORDERS) -> jets.TaylorScalar:
        return jets.expand(self.F2, x, y, orders)

    def sample_sites(self, rng: np.random.Generator, k: int, unit: bool = False,
                     admissible: bool = True) -> PointedVector:
        """Random sites in the sampling region; optionally normalised to F = 1.

        Sites whose metric fails the positive-definiteness policy are redrawn.
        """
        region = self.sample_region if self.sample_region is not None else self.chart.shrink(0.8)
        xs, ys = [], []
        have = 0
        while have < k:
            x = region.sample(rng, 2 * (k - have) + 4)
            y = rng.normal(size=x.shape)
            if admissible:
                keep = admissible_mask(self, x, y)
                x, y = x[keep], y[keep]
            xs.append(x)
            ys.append(y)
            have += len(x)
        x = np.concatenate(xs)[:k]
        y = np.concatenate(ys)[:k]
        if unit:
            y = y / self.F(x, y)[:, None]
        return PointedVector(x, y)


def _check_site(model: FinslerModel, site: PointedVector) -> None:
    if site.n != model.n:
        raise ValueError(f"site dimension {site.n} does not match model dimension {model.n}")
    if not np.all(model.chart.contains(site.x)):
        raise DomainError(f"site outside the chart of {model.name}")


def eval_F(model: FinslerModel, site: PointedVector) -> np.ndarray:
    """F(x, y) at a (batched) site inside the chart."""
    _check_site(model, site)
    f2 = model.F2_value(site.x, site.y)
    if np.any(f2 < 0):
        raise DomainError("F^2 is negative; not a Finsler function at this site")
    return np.sqrt(f2)


# metric tensor -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricValue:
    g: np.ndarray
    g_inv: np.ndarray
    site: PointedVector

    @property
    def min_eigenvalue(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.g)[..., 0]


def metric_array(model: FinslerModel, x, y) -> np.ndarray:
    """g_ij = (1/2) d^2 F^2 / dy^i dy^j, batched, without validity checks."""
    P = model.expand(x, y, (0, 2))
    return 0.5 * P.derivative_tensor(0, 2)


def admissible_mask(model: FinslerModel, x, y) -> np.ndarray:
    g = metric_array(model, x, y)
    ev = np.linalg.eigvalsh(g)
    tr = np.trace(g, axis1=-2, axis2=-1)
    return ev[..., 0] > PD_THRESHOLD * np.abs(tr)


def metric_tensor(model: FinslerModel, site: PointedVector) -> MetricValue:
    """Metric tensor and its inverse; raises DomainError if g is not positive definite."""
    _check_site(model, site)
    g = metric_array(model, site.x, site.y)
    ev = np.linalg.eigvalsh(g)
    if np.any(ev[..., 0] <= PD_THRESHOLD * np.abs(np.trace(g, axis1=-2, axis2=-1))):
        raise DomainError(f"metric tensor of {model.name} is not positive definite at this site")
    return MetricValue(g, np.linalg.inv(g), site)


def check_homogeneity(model: FinslerModel, sites: PointedVector, lambdas=(0.5, 2.0, 10.0)) -> float:
    """max |F(x, lam y) - lam F(x, y)| over sites and scale samples."""
    base = model.F(sites.x, sites.y)
    worst = 0.0
    for lam in lambdas:
        if lam <= 0:
            raise ValueError("scale samples must be positive")
        worst = max(worst, float(np.max(np.abs(model.F(sites.x, lam * sites.y) - lam * base))))
    return worst


def check_strong_convexity(model: FinslerModel, sites: PointedVector) -> float:
    """Minimum eigenvalue of g over the sites (> 0 certifies them)."""
    g = metric_array(model, sites.x, sites.y)
    return float(np.min(np.linalg.eigvalsh(g)[..., 0]))


# families ------------------------------------------------------------------------


def _quadratic(a, y, n):
    total = 0.0
    for i in range(n):
        for j in range(n):
            aij = a[i][j]
            if isinstance(aij, (int, float)) and aij == 0:
                continue
            total = total + aij * y[i] * y[j]
    return total


def from_program(name: str, n: int, F2: Callable, chart=None, **meta) -> FinslerModel:
    """Wrap an arbitrary F^2 program (no validation beyond what callers run)."""
    chart = chart or Box((-5.0,) * n, (5.0,) * n)
    return FinslerModel(name=name, n=n, chart=chart, F2=F2, **meta)


def euclidean(n: int = 2, chart=None) -> FinslerModel:
    def F2(x, y):
        return sum(y[i] * y[i] for i in range(n))

    return FinslerModel(
        name=f"euclidean-{n}", n=n, chart=chart or Box((-10.0,) * n, (10.0,) * n), F2=F2,
        is_riemannian=True, is_flat_expected=True, x_independent=True, curvature=0.0,
        metric_matrix=lambda x: np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n)),
        sample_region=Box((-2.0,) * n, (2.0,) * n),
        descriptor={"family": "euclidean", "dim": n, "params": {}},
    )


def riemannian(name: str, n: int, a: Callable, chart, curvature=None, matrix=None,
               **meta) -> FinslerModel:
    """F^2 = a_ij(x) y^i y^j for a jet-aware coefficient program ``a(x)``."""

    def F2(x, y):
        return _quadratic(a(x), y, n)

    if matrix is None:
        def matrix(x):
            x = np.asarray(x, dtype=float)
            rows = a([x[..., i] for i in range(n)])
            out = np.empty(x.shape[:-1] + (n, n))
            for i in range(n):
                for j in range(n):
                    out[..., i, j] = rows[i][j]
            return out

    return FinslerModel(name=name, n=n, chart=chart, F2=F2, is_riemannian=True,
                        curvature=curvature, metric_matrix=matrix, **meta)


def riemannian_constant(a, chart=None, name="flat-torus") -> FinslerModel:
    """Constant-coefficient metric; a fundamental domain chart of a flat torus."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    rows = [[float(a[i, j]) for j in range(n)] for i in range(n)]
    return riemannian(
        name, n, lambda x: rows, chart or Box((0.0,) * n, (2 * np.pi,) * n), curvature=0.0,
        is_flat_expected=True, x_independent=True,
        descriptor={"family": "riemannian-constant", "dim": n, "params": {"a": a.tolist()}},
    )


def sphere_stereographic() -> FinslerModel:
    """Unit round sphere, stereographic projection from the south pole.

    The north pole sits at the origin; the equator is the unit circle.
    """

    def a(x):
        c = 4.0 / ((1.0 + x[0] * x[0] + x[1] * x[1]) ** 2)
        return [[c, 0.0], [0.0, c]]

    def embed(x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return np.stack([2 * x[..., 0], 2 * x[..., 1], 1 - r2], axis=-1) / (1 + r2)[..., None]

    return riemannian(
        "s2-stereographic", 2, a, Box((-100.0, -100.0), (100.0, 100.0)), curvature=1.0,
        sample_region=Box((-1.5, -1.5), (1.5, 1.5)), embedding=embed,
        descriptor={"family": "sphere", "dim": 2, "params": {"chart": "stereographic"}},
    )


def sphere_polar() -> FinslerModel:
    """Unit round sphere in (colatitude, longitude) coordinates."""

    def a(x):
        s = jets.sin(x[0])
        return [[1.0, 0.0], [0.0, s * s]]

    def embed(x):
        x = np.asarray(x, dtype=float)
        th, ph = x[..., 0], x[..., 1]
        return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)

    return riemannian(
        "s2-polar", 2, a, Box((0.0, -np.pi), (np.pi, np.pi)), curvature=1.0,
        sample_region=Box((0.4, -1.4), (np.pi - 0.4, 1.4)), embedding=embed,
        descriptor={"family": "sphere", "dim": 2, "params": {"chart": "polar"}},
    )


def hyperbolic_disk() -> FinslerModel:
    """Poincare disk model of the hyperbolic plane (curvature -1)."""

    def a(x):
        c = 4.0 / ((1.0 - x[0] * x[0] - x[1] * x[1]) ** 2)
        return [[c, 0.0], [0.0, c]]

    return riemannian(
        "hyperbolic-disk", 2, a, Disk((0.0, 0.0), 1.0), curvature=-1.0,
        sample_region=Disk((0.0, 0.0), 0.7),
        descriptor={"family": "hyperbolic-disk", "dim": 2, "params": {}},
    )


def minkowski_quartic(n: int = 2, chart=None) -> FinslerModel:
    """F^2 = (sum y_i^4)^(1/2): a non-Riemannian Minkowski norm.

    g degenerates on the coordinate axes of each tangent space; sampling
    rejects sites failing the positive-definiteness policy.
    """

    def F2(x, y):
        return jets.sqrt(sum(y[i] ** 4 for i in range(n)))

    name = "minkowski-quartic" if n == 2 else f"minkowski-quartic-{n}"
    return FinslerModel(
        name=name, n=n, chart=chart or Box((-10.0,) * n, (10.0,) * n), F2=F2,
        is_flat_expected=True, x_independent=True,
        sample_region=Box((-2.0,) * n, (2.0,) * n),
        descriptor={"family": "minkowski-quartic", "dim": n, "params": {}},
        notes="g is singular on coordinate axes of T_xM",
    )


def randers(name: str, n: int, a: Callable, b: Callable, chart, **meta) -> FinslerModel:
    """F = sqrt(a_ij y^i y^j) + b_i y^i for jet-aware programs a(x), b(x)."""

    def F2(x, y):
        alpha2 = _quadratic(a(x), y, n)
        bx = b(x)
        beta = sum(bx[i] * y[i] for i in range(n))
        return alpha2 + 2.0 * beta * jets.sqrt(alpha2) + beta * beta

    return FinslerModel(name=name, n=n, chart=chart, F2=F2, **meta)


def flat_randers(a=None, b=(0.5, 0.0), chart=None, check: bool = True,
                 name: str = "flat-randers") -> FinslerModel:
    """Constant Randers norm: a non-reversible Minkowski space."""
    b = np.asarray(b, dtype=float)
    n = len(b)
    a = np.eye(n) if a is None else np.asarray(a, dtype=float)
    if check and float(b @ np.linalg.solve(a, b)) >= 1.0:
        raise ValueError("Randers condition |b|_a < 1 violated")
    rows = [[float(a[i, j]) for j in range(n)] for i in range(n)]
    bv = [float(v) for v in b]
    return randers(
        name, n, lambda x: rows, lambda x: bv, chart or Box((-10.0,) * n, (10.0,) * n),
        is_flat_expected=True, x_independent=True, sample_region=Box((-2.0,) * n, (2.0,) * n),
        descriptor={"family": "randers-flat", "dim": n, "params": {"a": a.tolist(), "b": b.tolist()}},
    )


def curved_randers() -> FinslerModel:
    """Position-dependent Randers metric on the unit disk.

    a = (1 + |x|^2 / 2) I and b = 0.3 (x2, x1^2), so |b|_a < 0.3 on the chart.
    Its Berwald curvature is generically nonzero.
    """

    def a(x):
        c = 1.0 + 0.5 * (x[0] * x[0] + x[1] * x[1])
        return [[c, 0.0], [0.0, c]]

    def b(x):
        return [0.3 * x[1], 0.3 * x[0] * x[0]]

    return randers(
        "curved-randers", 2, a, b, Disk((0.0, 0.0), 1.0), sample_region=Disk((0.0, 0.0), 0.8),
        descriptor={"family": "randers-curved", "dim": 2, "params": {}},
    )


BUILTINS: dict[str, Callable[[], FinslerModel]] = {
    "euclidean-2": lambda: euclidean(2),
    "euclidean-3": lambda: euclidean(3),
    "minkowski-quartic": lambda: minkowski_quartic(2),
    "minkowski-quartic-3": lambda: minkowski_quartic(3),
    "flat-randers": lambda: flat_randers(),
    "curved-randers": curved_randers,
    "s2-stereographic": sphere_stereographic,
    "s2-polar": sphere_polar,
    "hyperbolic-disk": hyperbolic_disk,
    "flat-torus": lambda: riemannian_constant([[1.0, 0.3], [0.3, 1.0]]),
}

ALIASES = {"s2": "s2-stereographic", "euclidean": "euclidean-2", "randers": "flat-randers",
           "hyperbolic": "hyperbolic-disk", "quartic": "minkowski-quartic"}


def get_model(name: str) -> FinslerModel:
    key = ALIASES.get(name, name)
    if key not in BUILTINS:
        raise KeyError(f"unknown model {name!r}; known: {', '.join(sorted(BUILTINS))}")
    return BUILTINS[key]()


# JSON descriptors --------------------------------------------------------------

SCHEMA_PATH = Path(__file__).with_name("model_descriptor.schema.json")


def descriptor_schema() -> dict:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def model_from_descriptor(desc: dict) -> FinslerModel:
    """Build a model from a descriptor dict; raises jsonschema.ValidationError."""
    jsonschema.validate(desc, descriptor_schema())
    family, n = desc["family"], desc["dim"]
    params = desc.get("params", {})
    chart = chart_from_json(desc["chart"]) if "chart" in desc else None
    if chart is not None and chart.n != n:
        raise jsonschema.ValidationError("chart dimension does not match dim")
    if family == "euclidean":
        return euclidean(n, chart)
    if family == "minkowski-quartic":
        return minkowski_quartic(n, chart)
    if family == "riemannian-constant":
        return riemannian_constant(params["a"], chart)
    if family == "randers-flat":
        return flat_randers(params.get("a"), params["b"], chart)
    if n != 2:
        raise jsonschema.ValidationError(f"family {family!r} is only defined for dim 2")
    if family == "sphere":
        return sphere_polar() if params.get("chart") == "polar" else sphere_stereographic()
    if family == "hyperbolic-disk":
        return hyperbolic_disk()
    return curved_randers()


def load_model(path) -> FinslerModel:
    return model_from_descriptor(json.loads(Path(path).read_text(encoding="utf-8")))
