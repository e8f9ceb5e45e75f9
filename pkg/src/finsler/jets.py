"""Truncated multivariate Taylor arithmetic over the slit tangent bundle.

A :class:`TaylorScalar` is a polynomial in the 2n perturbation variables
``(dx_1..dx_n, dy_1..dy_n)`` truncated separately in x-degree and y-degree.
Coefficients are stored against an ordered list of admissible multi-indices
(only monomials inside the truncation are kept), with leading batch axes so a
whole sweep of sites, or a matrix of jets, is one array.

Programs are plain Python callables ``f(x, y)`` taking sequences of n
components.  They are evaluated on floats / numpy arrays for plain values, and
on lifted jets for exact partial derivatives.  Use the module-level
:func:`sqrt`, :func:`exp`, ... so the same program runs on both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import Callable, Sequence

import numpy as np

DEFAULT_ORDERS = (2, 5)


class OrderExceededError(ValueError):
    """A derivative beyond the jet's truncation order was requested."""


class DomainError(ValueError):
    """A program was evaluated outside the set where it is defined."""


def _compositions(n: int, d: int):
    if n == 1:
        yield (d,)
        return
    for first in range(d, -1, -1):
        for rest in _compositions(n - 1, d - first):
            yield (first,) + rest


class _Basis:
    """Admissible monomials for (n, ox, oy) plus the product table."""

    def __init__(self, n: int, ox: int, oy: int):
        self.n, self.ox, self.oy = n, ox, oy
        mons = []
        for dx in range(ox + 1):
            for dy in range(oy + 1):
                for a in _compositions(n, dx):
                    for b in _compositions(n, dy):
                        mons.append(a + b)
        mons.sort(key=sum)
        self.monomials = mons
        self.position = {m: k for k, m in enumerate(mons)}
        self.size = len(mons)
        self.factorial = np.array(
            [math.prod(math.factorial(e) for e in m) for m in mons], dtype=float
        )
        ia, ib, starts = [], [], []
        for c in mons:
            starts.append(len(ia))
            for a in product(*(range(e + 1) for e in c)):
                b = tuple(ci - ai for ci, ai in zip(c, a))
                ia.append(self.position[a])
                ib.append(self.position[b])
        self.ia = np.array(ia, dtype=np.intp)
        self.ib = np.array(ib, dtype=np.intp)
        self.starts = np.array(starts, dtype=np.intp)


@lru_cache(maxsize=None)
def _basis(n: int, ox: int, oy: int) -> _Basis:
    return _Basis(n, ox, oy)


@lru_cache(maxsize=None)
def _diff_table(n: int, ox: int, oy: int, var: int):
    src = _basis(n, ox, oy)
    if var < n:
        dst = _basis(n, ox - 1, oy)
    else:
        dst = _basis(n, ox, oy - 1)
    idx, fac = [], []
    for m in dst.monomials:
        up = list(m)
        up[var] += 1
        idx.append(src.position[tuple(up)])
        fac.append(m[var] + 1)
    return dst, np.array(idx, dtype=np.intp), np.array(fac, dtype=float)


@lru_cache(maxsize=None)
def _truncate_table(n: int, orders: tuple[int, int], to: tuple[int, int]):
    src = _basis(n, *orders)
    dst = _basis(n, *to)
    return np.array([src.position[m] for m in dst.monomials], dtype=np.intp)


@lru_cache(maxsize=None)
def _tensor_table(n: int, ox: int, oy: int, kx: int, ky: int):
    basis = _basis(n, ox, oy)
    shape = (n,) * (kx + ky)
    idx = np.empty(shape, dtype=np.intp)
    fac = np.empty(shape, dtype=float)
    for slots in product(range(n), repeat=kx + ky):
        m = [0] * (2 * n)
        for s in slots[:kx]:
            m[s] += 1
        for s in slots[kx:]:
            m[n + s] += 1
        k = basis.position[tuple(m)]
        idx[slots] = k
        fac[slots] = basis.factorial[k]
    return idx, fac


class TaylorScalar:
    """Batch of truncated Taylor polynomials in (dx, dy).

    ``coeffs`` has shape ``(*batch, C)`` where C is the number of admissible
    monomials for ``orders = (ox, oy)``.  The coefficient of ``dx^a dy^b`` is
    ``d^a_x d^b_y f / (a! b!)``.
    """

    __slots__ = ("coeffs", "n", "orders")
    __array_priority__ = 1000

    def __init__(self, coeffs, n: int, orders: tuple[int, int]):
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.n = n
        self.orders = orders if type(orders) is tuple else (int(orders[0]), int(orders[1]))

    # construction ---------------------------------------------------------

    @classmethod
    def constant(cls, value, n: int, orders=DEFAULT_ORDERS) -> "TaylorScalar":
        value = np.asarray(value, dtype=float)
        basis = _basis(n, *orders)
        coeffs = np.zeros(value.shape + (basis.size,))
        coeffs[..., 0] = value
        return cls(coeffs, n, orders)

    @classmethod
    def variable(cls, value, var: int, n: int, orders=DEFAULT_ORDERS) -> "TaylorScalar":
        """Seed ``value + d(var)``; ``var`` < n is an x-slot, else a y-slot."""
        out = cls.constant(value, n, orders)
        if (var < n and orders[0] > 0) or (var >= n and orders[1] > 0):
            m = [0] * (2 * n)
            m[var] = 1
            out.coeffs[..., _basis(n, *orders).position[tuple(m)]] = 1.0
        return out

    @property
    def basis(self) -> _Basis:
        return _basis(self.n, *self.orders)

    @property
    def value(self) -> np.ndarray:
        return self.coeffs[..., 0]

    @property
    def shape(self) -> tuple:
        return self.coeffs.shape[:-1]

    def __repr__(self) -> str:
        return f"TaylorScalar(n={self.n}, orders={self.orders}, batch={self.shape})"

    def __getitem__(self, key) -> "TaylorScalar":
        if not isinstance(key, tuple):
            key = (key,)
        return TaylorScalar(self.coeffs[key], self.n, self.orders)

    @staticmethod
    def stack(items: Sequence["TaylorScalar"], axis: int = 0) -> "TaylorScalar":
        items = list(items)
        orders = (min(t.orders[0] for t in items), min(t.orders[1] for t in items))
        arrs = [t.truncate(orders).coeffs for t in items]
        if axis < 0:
            axis -= 1
        return TaylorScalar(np.stack(arrs, axis=axis), items[0].n, orders)

    # structural operations ----------------------------------------------

    def truncate(self, orders) -> "TaylorScalar":
        orders = (int(orders[0]), int(orders[1]))
        if orders == self.orders:
            return self
        if orders[0] > self.orders[0] or orders[1] > self.orders[1]:
            raise OrderExceededError(f"cannot raise truncation {self.orders} to {orders}")
        idx = _truncate_table(self.n, self.orders, orders)
        return TaylorScalar(self.coeffs[..., idx], self.n, orders)

    def diff(self, var: int) -> "TaylorScalar":
        """Exact derivative in perturbation variable ``var`` (drops one order)."""
        ox, oy = self.orders
        if (var < self.n and ox == 0) or (var >= self.n and oy == 0):
            raise OrderExceededError(f"no derivative left in variable {var} at orders {self.orders}")
        dst, idx, fac = _diff_table(self.n, ox, oy, var)
        return TaylorScalar(self.coeffs[..., idx] * fac, self.n, (dst.ox, dst.oy))

    def dx(self, i: int) -> "TaylorScalar":
        return self.diff(i)

    def dy(self, i: int) -> "TaylorScalar":
        return self.diff(self.n + i)

    def partial(self, ax: Sequence[int], ay: Sequence[int]) -> np.ndarray:
        """Return d^ax_x d^ay_y at the expansion point."""
        ax, ay = tuple(int(a) for a in ax), tuple(int(a) for a in ay)
        if len(ax) != self.n or len(ay) != self.n:
            raise ValueError("multi-index length must equal the dimension")
        if sum(ax) > self.orders[0] or sum(ay) > self.orders[1]:
            raise OrderExceededError(
                f"requested orders ({sum(ax)}, {sum(ay)}) exceed truncation {self.orders}"
            )
        k = self.basis.position[ax + ay]
        return self.coeffs[..., k] * self.basis.factorial[k]

    def derivative_tensor(self, kx: int, ky: int) -> np.ndarray:
        """Full tensor of order-(kx, ky) partials, shape ``(*batch, n^kx, n^ky)``.

        Axes are ordered x-slots first, then y-slots.
        """
        if kx > self.orders[0] or ky > self.orders[1]:
            raise OrderExceededError(f"({kx}, {ky}) exceeds truncation {self.orders}")
        idx, fac = _tensor_table(self.n, *self.orders, kx, ky)
        return self.coeffs[..., idx] * fac

    # arithmetic -------------------------------------------------------------

    def _coerce(self, other) -> "TaylorScalar":
        if isinstance(other, TaylorScalar):
            if other.n != self.n:
                raise ValueError("jets over different dimensions")
            return other
        return TaylorScalar.constant(other, self.n, self.orders)

    def _align(self, other):
        other = self._coerce(other)
        if other.orders == self.orders:
            return self, other
        orders = (min(self.orders[0], other.orders[0]), min(self.orders[1], other.orders[1]))
        return self.truncate(orders), other.truncate(orders)

    def __add__(self, other):
        if not isinstance(other, TaylorScalar):
            if np.ndim(other) == 0:
                c = self.coeffs.copy()
            else:
                c = np.array(np.broadcast_to(self.coeffs, np.broadcast_shapes(
                    self.coeffs.shape, np.shape(other) + (1,))))
            c[..., 0] += other
            return TaylorScalar(c, self.n, self.orders)
        if other.orders == self.orders and other.n == self.n:
            return TaylorScalar(self.coeffs + other.coeffs, self.n, self.orders)
        a, b = self._align(other)
        return TaylorScalar(a.coeffs + b.coeffs, a.n, a.orders)

    __radd__ = __add__

    def __neg__(self):
        return TaylorScalar(-self.coeffs, self.n, self.orders)

    def __pos__(self):
        return self

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, TaylorScalar):
            return TaylorScalar(self.coeffs * np.asarray(other, dtype=float)[..., None],
                                self.n, self.orders)
        if other.orders == self.orders and other.n == self.n:
            a, b = self, other
        else:
            a, b = self._align(other)
        basis = _basis(a.n, *a.orders)
        prod = a.coeffs[..., basis.ia] * b.coeffs[..., basis.ib]
        return TaylorScalar(np.add.reduceat(prod, basis.starts, axis=-1), a.n, a.orders)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, TaylorScalar):
            return TaylorScalar(self.coeffs / np.asarray(other, dtype=float)[..., None],
                                self.n, self.orders)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, (int, np.integer)) and p >= 0:
            out = TaylorScalar.constant(np.ones(self.shape), self.n, self.orders)
            base, e = self, int(p)
            while e:
                if e & 1:
                    out = out * base
                e >>= 1
                if e:
                    base = base * base
            return out
        return power(self, float(p))

    def reciprocal(self) -> "TaylorScalar":
        return power(self, -1.0)

    def compose(self, series: Sequence[np.ndarray]) -> "TaylorScalar":
        """Evaluate ``sum_k series[k] * (self - self.value)**k`` by Horner.

        ``series[k]`` is ``f^(k)(value)/k!``; terms past the nilpotency
        order ``ox + oy`` vanish identically and may be omitted.
        """
        e = TaylorScalar(self.coeffs.copy(), self.n, self.orders)
        e.coeffs[..., 0] = 0.0
        kmax = min(len(series) - 1, sum(self.orders))
        out = TaylorScalar.constant(series[kmax], self.n, self.orders)
        for k in range(kmax - 1, -1, -1):
            out = out * e + series[k]
        return out


# analytic functions -------------------------------------------------------


def _nil(t: TaylorScalar) -> int:
    return sum(t.orders)


def power(a, p: float):
    """``a ** p`` for real p; jets need a positive constant term unless p is a
    nonnegative integer."""
    if not isinstance(a, TaylorScalar):
        a = np.asarray(a, dtype=float)
        if not float(p).is_integer() and np.any(a < 0):
            raise DomainError("fractional power of a negative number")
        with np.errstate(divide="raise", invalid="raise"):
            try:
                return a ** p
            except FloatingPointError as exc:
                raise DomainError(str(exc)) from exc
    a0 = a.value
    if float(p).is_integer() and p >= 0:
        return a ** int(p)
    if np.any(a0 <= 0):
        raise DomainError("non-integer power of a jet with nonpositive constant term")
    series, c = [], 1.0
    for k in range(_nil(a) + 1):
        series.append(c * a0 ** (p - k))
        c = c * (p - k) / (k + 1)
    return a.compose(series)


def sqrt(a):
    if not isinstance(a, TaylorScalar):
        a = np.asarray(a, dtype=float)
        if np.any(a < 0):
            raise DomainError("square root of a negative number")
        return np.sqrt(a)
    return power(a, 0.5)


def exp(a):
    if not isinstance(a, TaylorScalar):
        return np.exp(a)
    e0 = np.exp(a.value)
    return a.compose([e0 / math.factorial(k) for k in range(_nil(a) + 1)])


def log(a):
    if not isinstance(a, TaylorScalar):
        a = np.asarray(a, dtype=float)
        if np.any(a <= 0):
            raise DomainError("logarithm of a nonpositive number")
        return np.log(a)
    a0 = a.value
    if np.any(a0 <= 0):
        raise DomainError("logarithm of a jet with nonpositive constant term")
    series = [np.log(a0)]
    for k in range(1, _nil(a) + 1):
        series.append((-1.0) ** (k + 1) / (k * a0 ** k))
    return a.compose(series)


def _trig_series(a0, kmax, phase):
    # d^k/dx^k sin(x) = sin(x + k*pi/2)
    return [np.sin(a0 + (k + phase) * np.pi / 2) / math.factorial(k) for k in range(kmax + 1)]


def sin(a):
    if not isinstance(a, TaylorScalar):
        return np.sin(a)
    return a.compose(_trig_series(a.value, _nil(a), 0))


def cos(a):
    if not isinstance(a, TaylorScalar):
        return np.cos(a)
    return a.compose(_trig_series(a.value, _nil(a), 1))


# jet matrices ----------------------------------------------------------------


def jet_matmul(A: TaylorScalar, B: TaylorScalar) -> TaylorScalar:
    """Matrix product over the two trailing batch axes of jet matrices."""
    A, B = A._align(B)
    basis = A.basis
    prod = np.einsum("...ijp,...jkp->...ikp", A.coeffs[..., basis.ia], B.coeffs[..., basis.ib])
    return TaylorScalar(np.add.reduceat(prod, basis.starts, axis=-1), A.n, A.orders)


def jet_inv(A: TaylorScalar) -> TaylorScalar:
    """Inverse of a jet matrix via the nilpotent Neumann series."""
    a0inv = np.linalg.inv(A.value)
    E = A.coeffs.copy()
    E[..., 0] = 0.0
    X = TaylorScalar(-np.einsum("...ij,...jkp->...ikp", a0inv, E), A.n, A.orders)
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    S = TaylorScalar.constant(eye, A.n, A.orders)
    for _ in range(_nil(A)):
        S = jet_matmul(X, S) + eye
    return TaylorScalar(np.einsum("...ijp,...jk->...ikp", S.coeffs, a0inv), A.n, A.orders)


# sites and evaluation ------------------------------------------------------


@dataclass(frozen=True)
class PointedVector:
    """Evaluation site (x, y) with y != 0; arrays may carry leading batch axes."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape:
            raise ValueError(f"x and y shapes differ: {x.shape} vs {y.shape}")
        if np.any(np.linalg.norm(y, axis=-1) == 0.0):
            raise DomainError("anchor vector y must be nonzero")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[-1]


def lift(x, y, orders=DEFAULT_ORDERS):
    """Seed jets ``x_i + dx_i`` and ``y_i + dy_i`` at a (batched) site."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[-1]
    xs = [TaylorScalar.variable(x[..., i], i, n, orders) for i in range(n)]
    ys = [TaylorScalar.variable(y[..., i], n + i, n, orders) for i in range(n)]
    return xs, ys


Program = Callable[[Sequence, Sequence], object]


def expand(program: Program, x, y, orders=DEFAULT_ORDERS) -> TaylorScalar:
    """Taylor-expand ``program`` at (x, y) to the given truncation."""
    xs, ys = lift(x, y, orders)
    out = program(xs, ys)
    if not isinstance(out, TaylorScalar):
        # program ignored its inputs entirely
        out = TaylorScalar.constant(np.broadcast_to(out, np.shape(x)[:-1]), len(xs), orders)
    return out


def partial(program: Program, site: PointedVector, ax, ay, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Exact ``d^ax_x d^ay_y program`` at ``site``."""
    if sum(ax) > orders[0] or sum(ay) > orders[1]:
        raise OrderExceededError(f"requested ({sum(ax)}, {sum(ay)}) beyond truncation {orders}")
    return expand(program, site.x, site.y, orders).partial(ax, ay)


def _stencil_1d(order: int):
    offsets = np.array([order / 2.0 - j for j in range(order + 1)])
    weights = np.array([(-1.0) ** j * math.comb(order, j) for j in range(order + 1)])
    return offsets, weights


def default_step(total_order: int) -> float:
    """Step balancing O(h^4) truncation against rounding for a k-th derivative."""
    return float(np.finfo(float).eps ** (1.0 / (total_order + 4)))


def fd_partial(program: Program, site: PointedVector, ax, ay, step: float | None = None,
               domain: Callable[[np.ndarray], np.ndarray] | None = None):
    """Finite-difference ``d^ax_x d^ay_y program`` at a single site.

    Central differences of every order with two-level Richardson extrapolation,
    ``(4 D(h/2) - D(h)) / 3``, accurate to O(h^4).  ``domain`` is an optional
    predicate on x-points; the stencil must lie inside it.  Vector-valued
    programs are differentiated componentwise.
    """
    x = np.asarray(site.x, dtype=float)
    y = np.asarray(site.y, dtype=float)
    n = x.shape[-1]
    alpha = tuple(int(a) for a in ax) + tuple(int(a) for a in ay)
    k = sum(alpha)
    if k == 0:
        return np.asarray(program(list(x), list(y)))
    h = default_step(k) if step is None else float(step)
    if not h > 0:
        raise ValueError("step must be positive")
    base = np.concatenate([x, y])
    if np.any((base + h / 2) - base == 0.0):
        raise ValueError("finite-difference step underflows at this site")

    axes = [i for i in range(2 * n) if alpha[i] > 0]
    stencils = [_stencil_1d(alpha[i]) for i in axes]
    offs = np.array(list(product(*(s[0] for s in stencils))))
    wts = np.array([math.prod(w) for w in product(*(s[1] for s in stencils))])

    def level(hh):
        pts = np.repeat(base[None, :], len(offs), axis=0)
        pts[:, axes] += offs * hh
        if domain is not None and not np.all(domain(pts[:, :n])):
            raise DomainError("site too close to the chart boundary for the stencil")
        vals = np.asarray(program([pts[:, i] for i in range(n)], [pts[:, n + i] for i in range(n)]))
        if vals.ndim == 0:
            vals = np.full(len(offs), float(vals))
        return np.tensordot(wts, vals, axes=(0, 0)) / hh ** k

    return (4.0 * level(h / 2) - level(h)) / 3.0
