import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from finsler import jets
from finsler.jets import (DomainError, OrderExceededError, PointedVector, TaylorScalar,
                          fd_partial, jet_inv, jet_matmul)

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)
point = st.tuples(finite, finite, finite, finite)


def poly(xs, ys):
    x0, x1 = xs
    y0, y1 = ys
    return x0 * x0 * y0 + 3 * x1 * y0 * y1 * y1 - x0 * x1 * y1 ** 3 + 2.0


def test_variable_seeds_first_order():
    t = TaylorScalar.variable(1.5, 2, 2, (1, 2))
    assert t.value == 1.5
    assert t.partial((0, 0), (1, 0)) == 1.0
    assert t.partial((1, 0), (0, 0)) == 0.0


def test_polynomial_partials_exact():
    site = PointedVector(np.array([0.3, -0.7]), np.array([1.1, 0.4]))
    x0, x1 = site.x
    y0, y1 = site.y
    assert jets.partial(poly, site, (1, 0), (1, 0)) == pytest.approx(2 * x0)
    assert jets.partial(poly, site, (0, 1), (0, 2)) == pytest.approx(6 * y0 - 6 * x0 * y1)
    assert jets.partial(poly, site, (1, 1), (0, 3)) == pytest.approx(-6.0)
    assert jets.partial(poly, site, (0, 0), (0, 0)) == pytest.approx(poly(list(site.x), list(site.y)))


def test_order_exceeded():
    site = PointedVector(np.zeros(2), np.ones(2))
    with pytest.raises(OrderExceededError):
        jets.partial(poly, site, (2, 1), (0, 0), orders=(2, 5))
    t = jets.expand(poly, site.x, site.y, (1, 1))
    with pytest.raises(OrderExceededError):
        t.derivative_tensor(0, 2)
    with pytest.raises(OrderExceededError):
        t.truncate((2, 1))


@given(point, point)
def test_leibniz_rule(a, b):
    # (fg)' = f'g + fg' for every first-order direction
    def f(xs, ys):
        return jets.sin(xs[0] * ys[1]) + ys[0] * ys[0]

    def g(xs, ys):
        return jets.exp(0.3 * xs[1]) * (1.0 + ys[1] * ys[1])

    x = np.array(a[:2])
    y = np.array(b[2:]) + 3.0
    F = jets.expand(f, x, y, (1, 2))
    G = jets.expand(g, x, y, (1, 2))
    FG = F * G
    for var in range(4):
        lhs = FG.diff(var).value
        rhs = (F.diff(var) * G.truncate(F.diff(var).orders)).value + (F.truncate(G.diff(var).orders) * G.diff(var)).value
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@given(point)
def test_mixed_partials_commute(a):
    def f(xs, ys):
        return jets.cos(xs[0] + 2 * ys[1]) * jets.exp(xs[1] * ys[0])

    x = np.array(a[:2])
    y = np.array(a[2:])
    t = jets.expand(f, x, y, (2, 3))
    T = t.derivative_tensor(1, 2)  # [k, l, m] = d_xk d_yl d_ym
    assert np.allclose(T, np.swapaxes(T, -1, -2), atol=1e-12)
    H = t.derivative_tensor(2, 0)
    assert np.allclose(H, np.swapaxes(H, -1, -2), atol=1e-12)
    for var1, var2 in [(0, 3), (1, 2), (2, 3)]:
        assert t.diff(var1).diff(var2).value == pytest.approx(t.diff(var2).diff(var1).value, abs=1e-12)


@given(point)
def test_exp_log_inverse(a):
    x = np.array(a[:2])
    y = np.array(a[2:])

    def f(xs, ys):
        return jets.log(jets.exp(xs[0] * ys[0] + ys[1]))

    def g(xs, ys):
        return xs[0] * ys[0] + ys[1]

    A = jets.expand(f, x, y, (2, 3))
    B = jets.expand(g, x, y, (2, 3))
    assert np.allclose(A.coeffs, B.coeffs, atol=1e-11)


@given(st.floats(0.2, 3.0), st.floats(-1.5, 1.5))
def test_power_and_sqrt_agree(c, p):
    x = np.array([c, 0.0])
    y = np.array([1.0, 0.5])

    def f(xs, ys):
        return jets.power(xs[0] + ys[0] * ys[0], 2 * p)

    def g(xs, ys):
        return jets.power(jets.sqrt(xs[0] + ys[0] * ys[0]), 4 * p)

    A = jets.expand(f, x, y, (1, 3))
    B = jets.expand(g, x, y, (1, 3))
    assert np.allclose(A.coeffs, B.coeffs, rtol=1e-10, atol=1e-10)


def test_domain_errors():
    site_x = np.array([-1.0, 0.0])
    y = np.array([1.0, 1.0])
    with pytest.raises(DomainError):
        jets.expand(lambda xs, ys: jets.sqrt(xs[0]), site_x, y, (1, 1))
    with pytest.raises(DomainError):
        jets.expand(lambda xs, ys: jets.log(xs[0]), site_x, y, (1, 1))
    with pytest.raises(DomainError):
        jets.log(-1.0)
    with pytest.raises(DomainError):
        PointedVector(np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        PointedVector(np.zeros(2), np.ones(3))


def test_jet_matrix_inverse():
    rng = np.random.default_rng(0)
    x = rng.normal(size=2)
    y = rng.normal(size=2)
    xs, ys = jets.lift(x, y, (1, 3))
    A = TaylorScalar.stack([TaylorScalar.stack([2.0 + xs[0] * ys[1], ys[0] * ys[0]], axis=-1),
                            TaylorScalar.stack([jets.sin(xs[1]), 3.0 + ys[1] * ys[0]], axis=-1)], axis=-2)
    I = jet_matmul(A, jet_inv(A))
    assert np.allclose(I.value, np.eye(2), atol=1e-13)
    E = I.coeffs.copy()
    E[..., 0] = 0.0
    assert np.max(np.abs(E)) < 1e-12


def test_batched_expansion_matches_single():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 2))
    y = rng.normal(size=(5, 2))
    batch = jets.expand(poly, x, y, (2, 3)).derivative_tensor(1, 2)
    for k in range(5):
        single = jets.expand(poly, x[k], y[k], (2, 3)).derivative_tensor(1, 2)
        assert np.allclose(batch[k], single)


@pytest.mark.parametrize("ax,ay", [((1, 0), (0, 0)), ((0, 0), (1, 1)), ((1, 0), (2, 0)),
                                   ((0, 1), (0, 3)), ((1, 1), (1, 1))])
def test_fd_oracle_matches_jets(ax, ay):
    def f(xs, ys):
        return jets.sin(xs[0]) * ys[0] ** 3 + jets.exp(0.5 * xs[1]) * ys[0] * ys[1] ** 2

    site = PointedVector(np.array([0.4, -0.2]), np.array([0.9, 1.3]))
    exact = jets.partial(f, site, ax, ay, orders=(2, 4))
    approx = fd_partial(f, site, ax, ay)
    assert approx == pytest.approx(exact, rel=1e-6, abs=1e-6)


def test_fd_respects_domain():
    site = PointedVector(np.array([1e-4, 0.0]), np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        fd_partial(lambda xs, ys: xs[0] ** 2, site, (2, 0), (0, 0), step=1e-2,
                   domain=lambda x: x[:, 0] > 0)


def test_default_step_shrinks_with_order():
    steps = [jets.default_step(k) for k in range(1, 7)]
    assert all(a < b for a, b in zip(steps, steps[1:]))
    assert steps[0] == pytest.approx(np.finfo(float).eps ** 0.2)


def test_compose_is_taylor_series_of_exp():
    t = TaylorScalar.variable(0.0, 2, 2, (0, 6))
    e = jets.exp(t)
    for k in range(7):
        assert e.partial((0, 0), (k, 0)) == pytest.approx(1.0)
    assert math.isclose(jets.sin(t).partial((0, 0), (3, 0)), -1.0)
