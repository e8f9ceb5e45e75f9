"""Canonical spray, Berwald connection and its curvatures in induced coordinates.

Conventions (used everywhere in the package):

* geodesics solve ``x'' + 2 G(x, x') = 0``;
* ``N^i_j = dG^i/dy^j``, ``Gamma^i_jk = d^2 G^i / dy^j dy^k``,
  ``B^i_jkl = d^3 G^i / dy^j dy^k dy^l``;
* with ``delta_k = d/dx^k - N^m_k d/dy^m``, the affine curvature is
  ``H^i_jkl = delta_k Gamma^i_lj - delta_l Gamma^i_kj
  + Gamma^m_lj Gamma^i_km - Gamma^m_kj Gamma^i_lm``,
  so that ``H(X, Y)Z = H^i_jkl Z^j X^k Y^l`` reproduces the Riemann tensor
  ``R(d_k, d_l) d_j`` of a quadratic F (round sphere: +1);
* ``R^i_jk = delta_j N^i_k - delta_k N^i_j = y^m H^i_mjk``.

Arrays are indexed with the upper index first, i.e. ``H[..., i, j, k, l]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np

from . import jets
from .jets import PointedVector, TaylorScalar, jet_inv, jet_matmul
from .models import FinslerModel, metric_array

FLAT_TOLERANCE = 1e-7

# G-jet truncation needed for each level of the tower
_LEVELS = {"G": (0, 0), "N": (0, 1), "Gamma": (0, 2), "B": (0, 3), "H": (1, 3)}


def _as_xy(site):
    if isinstance(site, PointedVector):
        return site.x, site.y
    x, y = site
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def spray_coefficients(model: FinslerModel, site) -> np.ndarray:
    """G^i = (1/4) g^il (y^k d^2F^2/dy^l dx^k - dF^2/dx^l)."""
    x, y = _as_xy(site)
    P = model.expand(x, y, (1, 2))
    Fx = P.derivative_tensor(1, 0)
    Fxy = P.derivative_tensor(1, 1)  # [..., k, l] = d_xk d_yl F^2
    g = 0.5 * P.derivative_tensor(0, 2)
    T = np.einsum("...k,...kl->...l", y, Fxy) - Fx
    return 0.25 * np.linalg.solve(g, T[..., None])[..., 0]


def spray_jet(model: FinslerModel, x, y, orders) -> TaylorScalar:
    """G as a jet vector (batch axis ``n`` last) truncated at ``orders``."""
    gx, gy = orders
    n = model.n
    P = model.expand(x, y, (gx + 1, gy + 2))
    Py = [P.dy(l) for l in range(n)]
    g = TaylorScalar.stack([TaylorScalar.stack([0.5 * Py[l].dy(m) for m in range(n)], axis=-1)
                            for l in range(n)], axis=-2)
    ys = jets.lift(x, y, P.orders)[1]
    T = []
    for l in range(n):
        t = -P.dx(l)
        for k in range(n):
            t = t + ys[k] * Py[l].dx(k)
        T.append(t)
    T = TaylorScalar.stack(T, axis=-1).truncate(orders)
    ginv = jet_inv(g.truncate(orders))
    col = TaylorScalar(T.coeffs[..., :, None, :], n, T.orders)
    G = jet_matmul(ginv, col)
    return TaylorScalar(0.25 * G.coeffs[..., :, 0, :], n, G.orders)


@dataclass(frozen=True)
class ConnectionData:
    """The Berwald tower at one or many sites (missing levels are None)."""

    site: PointedVector
    G: np.ndarray
    N: Optional[np.ndarray] = None
    Gamma: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    R_nl: Optional[np.ndarray] = None


def assemble_curvatures(N, Gamma, B, dN, dGamma):
    """Affine and nonlinear curvature from the y- and x-derivatives of G.

    ``dN[..., i, k, j] = d_xk N^i_j`` and ``dGamma[..., i, k, l, j] = d_xk Gamma^i_lj``.
    """
    # D[i,k,l,j] = delta_k Gamma^i_lj
    D = dGamma - np.einsum("...mk,...iljm->...iklj", N, B)
    H = (np.einsum("...iklj->...ijkl", D) - np.einsum("...ilkj->...ijkl", D)
         + np.einsum("...mlj,...ikm->...ijkl", Gamma, Gamma)
         - np.einsum("...mkj,...ilm->...ijkl", Gamma, Gamma))
    # E[i,j,k] = delta_j N^i_k
    E = dN - np.einsum("...mj,...ikm->...ijk", N, Gamma)
    R = E - np.swapaxes(E, -1, -2)
    return H, R


def connection_data(model: FinslerModel, site, level: str = "H") -> ConnectionData:
    """Evaluate the tower up to ``level`` (one of G, N, Gamma, B, H)."""
    if level not in _LEVELS:
        raise ValueError(f"unknown level {level!r}")
    x, y = _as_xy(site)
    pv = site if isinstance(site, PointedVector) else PointedVector(x, y)
    if level == "G":
        return ConnectionData(pv, spray_coefficients(model, (x, y)))
    Gj = spray_jet(model, x, y, _LEVELS[level])
    out = {"G": Gj.value, "N": Gj.derivative_tensor(0, 1)}
    if level in ("Gamma", "B", "H"):
        out["Gamma"] = Gj.derivative_tensor(0, 2)
    if level in ("B", "H"):
        out["B"] = Gj.derivative_tensor(0, 3)
    if level == "H":
        out["H"], out["R_nl"] = assemble_curvatures(
            out["N"], out["Gamma"], out["B"], Gj.derivative_tensor(1, 1), Gj.derivative_tensor(1, 2))
    return ConnectionData(pv, **out)


def nonlinear_connection(model, site) -> np.ndarray:
    return connection_data(model, site, "N").N


def berwald_coefficients(model, site) -> np.ndarray:
    return connection_data(model, site, "Gamma").Gamma


def berwald_curvature(model, site) -> np.ndarray:
    return connection_data(model, site, "B").B


def affine_curvature(model, site) -> np.ndarray:
    return connection_data(model, site, "H").H


def nonlinear_curvature(model, site) -> np.ndarray:
    return connection_data(model, site, "H").R_nl


def horizontal_derivative_F(model: FinslerModel, site) -> np.ndarray:
    """delta_k F = dF/dx^k - N^m_k dF/dy^m; vanishes for the Berwald connection."""
    x, y = _as_xy(site)
    P = model.expand(x, y, (1, 1))
    F = np.sqrt(P.value)[..., None]
    dFx = P.derivative_tensor(1, 0) / (2 * F)
    dFy = P.derivative_tensor(0, 1) / (2 * F)
    N = nonlinear_connection(model, (x, y))
    return dFx - np.einsum("...mk,...m->...k", N, dFy)


# tangent vectors to TM ------------------------------------------------------------


@dataclass(frozen=True)
class TangentOfTM:
    """Tangent vector (xi_x, xi_y) to TM at the point (x, y)."""

    x: np.ndarray
    y: np.ndarray
    xi_x: np.ndarray
    xi_y: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "xi_x", "xi_y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def site(self) -> PointedVector:
        return PointedVector(self.x, self.y)

    def horizontal(self, N) -> "TangentOfTM":
        return TangentOfTM(self.x, self.y, self.xi_x, -np.einsum("...ij,...j->...i", N, self.xi_x))

    def vertical(self, N) -> "TangentOfTM":
        return TangentOfTM(self.x, self.y, np.zeros_like(self.xi_x),
                           self.xi_y + np.einsum("...ij,...j->...i", N, self.xi_x))

    def j(self) -> np.ndarray:
        """Horizontal content, an element of T_xM."""
        return self.xi_x

    def vertical_part(self, N) -> np.ndarray:
        """The vertical map applied to this vector, an element of T_xM."""
        return self.xi_y + np.einsum("...ij,...j->...i", N, self.xi_x)


def gbar(model: FinslerModel, site, xi: TangentOfTM, eta: TangentOfTM) -> np.ndarray:
    """Sasaki-type metric g(j xi, j eta) + g(V xi, V eta) on TM minus the zero section."""
    x, y = _as_xy(site)
    g = metric_array(model, x, y)
    N = nonlinear_connection(model, (x, y))
    a = np.einsum("...ij,...i,...j->...", g, xi.j(), eta.j())
    b = np.einsum("...ij,...i,...j->...", g, xi.vertical_part(N), eta.vertical_part(N))
    return a + b


def curvature_operator(cd: ConnectionData, z1: TangentOfTM, z2: TangentOfTM, v) -> np.ndarray:
    """R^nabla_u(z1, z2) v from the affine and Berwald curvature at u.

    R(z1, z2) = H(j z1, j z2) + B(V z1, j z2) - B(V z2, j z1); the
    vertical-vertical part vanishes identically.
    """
    N = cd.N
    j1, j2 = z1.j(), z2.j()
    V1, V2 = z1.vertical_part(N), z2.vertical_part(N)
    hh = np.einsum("...ijkl,...j,...k,...l->...i", cd.H, v, j1, j2)
    vh = np.einsum("...ijkl,...j,...k,...l->...i", cd.B, v, j2, V1)
    hv = np.einsum("...ijkl,...j,...k,...l->...i", cd.B, v, j1, V2)
    return hh + vh - hv


# flatness -----------------------------------------------------------------------


@dataclass(frozen=True)
class FlatnessReport:
    flat: bool
    max_residual: float
    sites: int


def flatness_test(model: FinslerModel, sites: PointedVector | None = None, k: int = 16,
                  rng: np.random.Generator | None = None, region=None,
                  tol: float = FLAT_TOLERANCE) -> FlatnessReport:
    """Max |B| and |H| over F = 1 normalised sites; flat iff below ``tol``."""
    if sites is None:
        if k < 1:
            raise ValueError("need at least one site")
        rng = rng if rng is not None else np.random.default_rng(0)
        if region is not None:
            x = region.sample(rng, k)
            y = rng.normal(size=x.shape)
        else:
            s = model.sample_sites(rng, k)
            x, y = s.x, s.y
    else:
        x, y = sites.x, sites.y
    y = y / model.F(x, y)[..., None]
    cd = connection_data(model, (x, y), "H")
    res = float(max(np.max(np.abs(cd.B)), np.max(np.abs(cd.H))))
    return FlatnessReport(res < tol, res, int(np.prod(x.shape[:-1])))


# finite-difference oracle --------------------------------------------------------


def fd_spray(model: FinslerModel, site: PointedVector, step=None) -> np.ndarray:
    """G at a single site using only finite differences of plain F^2 values."""
    n = model.n
    e = np.eye(n, dtype=int)
    z = (0,) * n
    dom = model.chart.contains
    Fx = np.array([jets.fd_partial(model.F2, site, e[l], z, step, dom) for l in range(n)])
    Fxy = np.array([[jets.fd_partial(model.F2, site, e[k], e[l], step, dom) for l in range(n)]
                    for k in range(n)])
    g = 0.5 * np.array([[jets.fd_partial(model.F2, site, z, e[l] + e[m], step, dom)
                         for m in range(n)] for l in range(n)])
    return 0.25 * np.linalg.solve(g, site.y @ Fxy - Fx)


def fd_connection_data(model: FinslerModel, site: PointedVector, step=None) -> ConnectionData:
    """Berwald tower at one site from finite differences of the spray.

    N, Gamma, B and the x-derivatives feeding H are Richardson-extrapolated
    differences of G (evaluated only to first order in x and second in y),
    so none of the higher Taylor coefficients of the jet path are reused.
    """
    n = model.n
    z = (0,) * n

    def G_prog(xs, ys):
        x = np.stack([np.asarray(c, dtype=float) for c in xs], axis=-1)
        y = np.stack([np.asarray(c, dtype=float) for c in ys], axis=-1)
        return spray_coefficients(model, (x, y))

    def d(ax, ay):
        return jets.fd_partial(G_prog, site, ax, ay, step, model.chart.contains)

    def tensor(kx, ky):
        out = np.empty((n,) + (n,) * (kx + ky))
        cache = {}
        for slots in product(range(n), repeat=kx + ky):
            ax = np.bincount(slots[:kx], minlength=n) if kx else np.zeros(n, int)
            ay = np.bincount(slots[kx:], minlength=n) if ky else np.zeros(n, int)
            key = tuple(ax) + tuple(ay)
            if key not in cache:
                cache[key] = d(ax, ay)
            out[(slice(None),) + slots] = cache[key]
        return out

    N, Gamma, B = tensor(0, 1), tensor(0, 2), tensor(0, 3)
    H, R = assemble_curvatures(N, Gamma, B, tensor(1, 1), tensor(1, 2))
    return ConnectionData(site, fd_spray(model, site), N, Gamma, B, H, R)
