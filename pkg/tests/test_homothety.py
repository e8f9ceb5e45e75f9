import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finsler.berwald import TangentOfTM, flatness_test
from finsler.geodesic import ChartExitError
from finsler.homothety import (HomothetyMap, PreconditionError, TheoremConfig, banach_fixed_point,
                               check_geodesic_preservation, check_jacobian, compose, conjugate,
                               curvature_equivariance, decay_chain_check, dilation, linear_map,
                               polar_shift, push_tangent, random_tangents, rotation, shear,
                               shipped_pairs, translation, verify_homothety, verify_theorem)
from finsler.jets import PointedVector
from finsler.metricspace import quasi_distance
from finsler.models import get_model

PAIRS = shipped_pairs()
IDS = [f"{m.name}:{phi.name}" for m, phi in PAIRS]


def _bend_dphi(x):
    out = np.zeros(np.shape(x)[:-1] + (2, 2))
    out[..., 0, 0] = out[..., 1, 1] = 1.0
    out[..., 0, 1] = 0.4 * x[..., 1]
    return out


def _bend_d2phi(x):
    out = np.zeros(np.shape(x)[:-1] + (2, 2, 2))
    out[..., 0, 1, 1] = 0.4
    return out


def bend(exact_hessian=True):
    """A nonlinear map (not a homothety) for derivative plumbing tests."""
    return HomothetyMap(
        "bend", 1.0,
        phi=lambda x: np.stack([x[..., 0] + 0.2 * x[..., 1] ** 2, x[..., 1]], axis=-1),
        dphi=_bend_dphi, d2phi=_bend_d2phi if exact_hessian else None,
    )


@pytest.mark.parametrize("pair", PAIRS, ids=IDS)
def test_shipped_maps_are_homotheties(pair):
    m, phi = pair
    assert verify_homothety(m, phi, 64) < 1e-10
    pts = m.sample_sites(np.random.default_rng(3), 10).x
    assert check_jacobian(phi, pts) < 1e-6


def test_verify_homothety_examples():
    assert verify_homothety(get_model("quartic"), dilation(0.5)) < 1e-14
    assert verify_homothety(get_model("s2"), rotation(0.4)) < 1e-12
    assert verify_homothety(get_model("s2"), dilation(0.5)) > 0.1
    with pytest.raises(ValueError):
        verify_homothety(get_model("s2"), rotation(0.4), k=0)


def test_map_properties():
    d = dilation(0.5, 2, center=(1.0, 2.0))
    assert d.is_proper and not rotation(0.2).is_proper
    assert np.allclose(d([1.0, 2.0]), [1.0, 2.0])
    assert np.allclose(d.inverse(d([0.3, -0.7])), [0.3, -0.7])
    assert d.inverse.lam == 2.0
    with pytest.raises(ValueError):
        dilation(0.0)
    no_inv = HomothetyMap("f", 0.5, lambda x: 0.5 * x, lambda x: 0.5 * np.eye(2))
    assert no_inv.inverse is None
    with pytest.raises(ValueError):
        conjugate(no_inv, dilation(0.5))


def test_compose_derivatives_against_fd(rng):
    f = compose(rotation(0.3), compose(bend(exact_hessian=False), dilation(0.7)))
    x = rng.normal(size=2)
    assert check_jacobian(f, x[None]) < 1e-8
    h = 1e-5
    fd = np.stack([(f.jacobian(x + h * e) - f.jacobian(x - h * e)) / (2 * h) for e in np.eye(2)], -1)
    assert np.allclose(f.hessian(x), fd, atol=1e-8)
    assert f.lam == pytest.approx(0.7)


def test_push_tangent_is_jacobian_of_induced_map(rng):
    f = bend()
    x, y, a, b = rng.normal(size=(4, 2))
    z = TangentOfTM(x, y, a, b)
    pz = push_tangent(f, z)
    assert np.allclose(f.hessian(x), bend(exact_hessian=False).hessian(x), atol=1e-8)
    h = 1e-6
    P1 = f.push(x + h * a, y + h * b)
    P0 = f.push(x - h * a, y - h * b)
    assert np.allclose(pz.xi_x, (P1[0] - P0[0]) / (2 * h), atol=1e-8)
    assert np.allclose(pz.xi_y, (P1[1] - P0[1]) / (2 * h), atol=1e-8)


# Banach iteration -----------------------------------------------------------------------


def test_banach_dilation_origin():
    tol = 1e-10
    fp = banach_fixed_point(get_model("quartic"), dilation(0.5), [1.0, 1.0], tol=tol)
    assert np.max(np.abs(fp.p)) < tol
    assert abs(fp.iterations - np.log2(1 / tol)) < 5
    assert not fp.inverted and fp.residual < tol
    assert len(fp.history) == fp.iterations + 1


def test_banach_conjugated_dilation():
    m = get_model("flat-randers")
    phi = conjugate(translation((1.0, 2.0)), dilation(0.5))
    fp = banach_fixed_point(m, phi, [-3.0, 4.0], tol=1e-11)
    assert np.allclose(fp.p, [1.0, 2.0], atol=1e-10)


def test_banach_expanding_map_uses_inverse():
    m = get_model("flat-randers")
    fp = banach_fixed_point(m, dilation(2.0, 2, center=(0.5, -0.5)), [1.0, 1.0], tol=1e-10)
    assert fp.inverted and np.allclose(fp.p, [0.5, -0.5], atol=1e-9)


def test_banach_rejects_isometries():
    with pytest.raises(PreconditionError):
        banach_fixed_point(get_model("s2"), rotation(0.5), [0.3, 0.2])
    no_inv = HomothetyMap("grow", 2.0, lambda x: 2 * x, lambda x: 2 * np.eye(2))
    with pytest.raises(PreconditionError):
        banach_fixed_point(get_model("euclidean"), no_inv, [0.3, 0.2])


def test_banach_chart_and_budget_errors():
    m = get_model("flat-randers")
    with pytest.raises(ChartExitError):
        banach_fixed_point(m, dilation(0.5), [20.0, 0.0])
    with pytest.raises(ChartExitError):
        banach_fixed_point(m, dilation(0.5, 2, center=(30.0, 0.0)), [0.0, 0.0])
    with pytest.raises(RuntimeError):
        banach_fixed_point(m, dilation(0.9), [1.0, 1.0], tol=1e-12, max_iter=5)


@settings(max_examples=20)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_fixed_point_uniqueness(a, b, c, d):
    m = get_model("flat-randers")
    phi = conjugate(translation((1.0, 2.0)), dilation(0.5))
    tol = 1e-9
    p1 = banach_fixed_point(m, phi, [a, b], tol=tol).p
    p2 = banach_fixed_point(m, phi, [c, d], tol=tol).p
    assert float(m.F(p1, p2 - p1)) <= 2 * tol


# distances ------------------------------------------------------------------------------


@pytest.mark.parametrize("pair", [p for p in PAIRS if p[0].x_independent],
                         ids=[i for p, i in zip(PAIRS, IDS) if p[0].x_independent])
def test_distance_scaling_flat(pair, rng):
    m, phi = pair
    pts = m.sample_sites(rng, 40).x
    for p, q in zip(pts[:20], pts[20:]):
        lhs = quasi_distance(m, phi(p), phi(q)).value
        rhs = phi.lam * quasi_distance(m, p, q).value
        assert lhs == pytest.approx(rhs, abs=1e-12 * max(1.0, rhs))


@pytest.mark.parametrize("name,phi", [("hyperbolic-disk", rotation(1.1)),
                                      ("s2-stereographic", rotation(0.8)),
                                      ("s2-polar", polar_shift(0.9))])
def test_distance_invariance_curved(name, phi):
    m = get_model(name)
    rng = np.random.default_rng(5)
    pts = m.sample_region.sample(rng, 4)
    if name == "s2-polar":
        pts[:, 1] = np.clip(pts[:, 1], -1.4, 0.4)
    p, q = pts[0], pts[1]
    tol = 1e-10
    assert quasi_distance(m, phi(p), phi(q), tol).value == pytest.approx(
        quasi_distance(m, p, q, tol).value, abs=1e-8)


# equivariance and decay -----------------------------------------------------------------


@pytest.mark.parametrize("pair", PAIRS, ids=IDS)
def test_curvature_equivariance_shipped(pair):
    m, phi = pair
    rng = np.random.default_rng(11)
    s = m.sample_sites(rng, 6, unit=True)
    if m.name == "s2-polar":
        s = PointedVector(np.stack([s.x[:, 0], np.clip(s.x[:, 1], -1.4, 0.4)], 1), s.y)
    for x, y in zip(s.x, s.y):
        site = PointedVector(x, y)
        z1, z2 = random_tangents(rng, site, 2)
        v = rng.normal(size=m.n)
        assert curvature_equivariance(m, phi, site, z1, z2, v) < 1e-7


def test_curvature_equivariance_negative_control(rng):
    m = get_model("s2-stereographic")
    site = PointedVector(np.array([0.3, -0.2]), np.array([0.8, 0.5]))
    z1, z2 = random_tangents(rng, site, 2)
    res = curvature_equivariance(m, shear(0.5), site, z1, z2, rng.normal(size=2))
    assert res > 1e-2


def test_decay_flat_randers_is_zero(rng):
    m = get_model("flat-randers")
    site = PointedVector(np.array([0.3, 0.2]), np.array([1.0, 0.4]))
    z1, z2 = random_tangents(rng, site, 2)
    rep = decay_chain_check(m, dilation(0.5), site, z1, z2, rng.normal(size=2), rng.normal(size=2))
    assert rep.passed and np.all(rep.values == 0.0)


def test_decay_sphere_rotation_constant(rng):
    m = get_model("s2-stereographic")
    site = PointedVector(np.array([0.4, -0.1]), np.array([0.3, 0.9]))
    z1, z2 = random_tangents(rng, site, 2)
    rep = decay_chain_check(m, rotation(0.8), site, z1, z2, rng.normal(size=2), rng.normal(size=2),
                            n_max=6)
    assert rep.passed and abs(rep.values[0]) > 1e-3
    assert np.max(np.abs(rep.values - rep.values[0])) < 1e-7 * (1 + abs(rep.values[0]))


def test_decay_metric_pairing_scales():
    m = get_model("euclidean-2")
    site = PointedVector(np.array([0.3, 0.2]), np.array([1.0, 0.4]))
    z = TangentOfTM(site.x, site.y, [1.0, 0.0], [0.0, 1.0])
    rep = decay_chain_check(m, dilation(0.5), site, z, z, [0.7, -0.2], [0.0, 1.0], n_max=6,
                            pairing="metric")
    assert rep.passed
    assert np.allclose(rep.values, 0.25 ** np.arange(7) * rep.values[0], rtol=1e-14)
    with pytest.raises(ValueError):
        decay_chain_check(m, dilation(0.5), site, z, z, [1, 0], [0, 1], pairing="other")


def test_decay_detects_non_homothety(rng):
    m = get_model("hyperbolic-disk")
    site = PointedVector(np.array([0.1, 0.2]), np.array([1.0, 0.4]))
    z1, z2 = random_tangents(rng, site, 2)
    fake = linear_map(0.8 * np.eye(2), lam=0.8, name="fake")
    rep = decay_chain_check(m, fake, site, z1, z2, rng.normal(size=2), rng.normal(size=2), n_max=3)
    assert not rep.passed


def test_decay_chain_leaving_chart():
    m = get_model("hyperbolic-disk")
    site = PointedVector(np.array([0.5, 0.0]), np.array([1.0, 0.0]))
    z = TangentOfTM(site.x, site.y, [1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ChartExitError):
        decay_chain_check(m, dilation(2.0), site, z, z, [1.0, 0.0], [0.0, 1.0], n_max=3)


@pytest.mark.parametrize("name,phi", [("s2-stereographic", rotation(0.8)),
                                      ("hyperbolic-disk", rotation(1.1)),
                                      ("flat-randers", dilation(0.5))])
def test_geodesic_preservation(name, phi):
    m = get_model(name)
    assert check_geodesic_preservation(m, phi, [0.2, -0.1], [0.4, 0.3]) < 1e-8


def test_geodesic_preservation_fails_for_shear():
    m = get_model("s2-stereographic")
    assert check_geodesic_preservation(m, shear(0.5), [0.2, -0.1], [0.4, 0.3]) > 1e-3


# theorem pipeline -----------------------------------------------------------------------


def test_theorem_quartic():
    cfg = TheoremConfig(samples=8)
    rep = verify_theorem(get_model("quartic"), dilation(0.5), cfg)
    names = [s.name for s in rep.stages]
    assert names == ["precondition", "fixed_point", "flatness", "local_isometry",
                     "global_isometry", "injectivity"]
    assert rep.passed, rep.stages
    assert np.allclose(rep.fixed_point, 0.0, atol=1e-8)


def test_theorem_flat_randers_shifted_center():
    cfg = TheoremConfig(samples=8)
    phi = conjugate(translation((1.0, 2.0)), dilation(0.5))
    rep = verify_theorem(get_model("flat-randers"), phi, cfg)
    assert rep.passed
    assert np.allclose(rep.fixed_point, [1.0, 2.0], atol=1e-8)
    js = rep.to_json()
    assert set(js) == {"model", "map", "lambda", "fixed_point", "stages", "pass"}
    assert set(js["stages"][0]) == {"name", "residual", "tolerance", "pass"}
    assert js["lambda"] == 0.5 and js["pass"] is True


def test_theorem_rejects_sphere_rotation():
    rep = verify_theorem(get_model("s2"), rotation(0.8), TheoremConfig(samples=4))
    assert not rep.passed and len(rep.stages) == 1
    assert rep.stages[0].name == "precondition" and "lam = 1" in rep.stages[0].detail
    assert rep.to_json()["fixed_point"] is None


def test_theorem_rejects_fake_homothety_on_sphere():
    rep = verify_theorem(get_model("s2"), dilation(0.5), TheoremConfig(samples=4))
    assert not rep.passed and rep.stages[0].residual > 0.1


def test_every_proper_shipped_homothety_lives_on_a_flat_model():
    for m, phi in PAIRS:
        if phi.is_proper:
            assert flatness_test(m, k=8).flat, m.name
