import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from finsler import jets, models
from finsler.jets import DomainError, PointedVector
from finsler.models import (ALIASES, BUILTINS, Box, Disk, check_homogeneity, check_strong_convexity,
                            eval_F, flat_randers, get_model, load_model, metric_array,
                            metric_tensor, model_from_descriptor)

ALL = sorted(BUILTINS)


def site(x, y):
    return PointedVector(np.asarray(x, float), np.asarray(y, float))


def test_eval_F_examples():
    assert eval_F(get_model("euclidean-2"), site([0, 0], [3, 4])) == pytest.approx(5.0, abs=1e-15)
    assert eval_F(get_model("minkowski-quartic"), site([0, 0], [1, 1])) == pytest.approx(2 ** 0.25)
    fr = get_model("flat-randers")
    assert eval_F(fr, site([0, 0], [1, 0])) == pytest.approx(1.5)
    assert eval_F(fr, site([0, 0], [-1, 0])) == pytest.approx(0.5)


def test_eval_F_domain_errors():
    with pytest.raises(DomainError):
        eval_F(get_model("hyperbolic-disk"), site([0.9, 0.9], [1, 0]))
    with pytest.raises(DomainError):
        site([0, 0], [0, 0])
    with pytest.raises(ValueError):
        eval_F(get_model("euclidean-3"), site([0, 0], [1, 0]))


@pytest.mark.parametrize("name", ALL)
def test_positive_and_homogeneous(name, rng):
    m = get_model(name)
    s = m.sample_sites(rng, 100)
    assert np.all(eval_F(m, s) > 0)
    assert check_homogeneity(m, s) < 1e-12 * max(1.0, float(np.max(m.F(s.x, s.y)))) * 10


def test_homogeneity_euclidean_exact(rng):
    m = get_model("euclidean-2")
    assert check_homogeneity(m, m.sample_sites(rng, 20), lambdas=(0.5, 2.0, 4.0)) == 0.0


def test_homogeneity_negative_control(rng):
    broken = models.from_program("broken", 2, lambda x, y: y[0] * y[0] + y[1] * y[1] + 1.0)
    s = broken.sample_sites(rng, 10, admissible=False)
    assert check_homogeneity(broken, s) > 0.1
    with pytest.raises(ValueError):
        check_homogeneity(broken, s, lambdas=(-1.0,))


@pytest.mark.parametrize("name", ALL)
def test_euler_identities(name, rng):
    m = get_model(name)
    s = m.sample_sites(rng, 50)
    P = m.expand(s.x, s.y, (0, 3))
    f2 = P.value
    dF2 = P.derivative_tensor(0, 1)
    g = 0.5 * P.derivative_tensor(0, 2)
    dg = 0.5 * P.derivative_tensor(0, 3)
    y = s.y
    scale = np.maximum(1.0, np.abs(f2))
    assert np.max(np.abs(np.einsum("...j,...j", y, dF2) - 2 * f2) / scale) < 1e-10
    assert np.max(np.abs(np.einsum("...ij,...i,...j", g, y, y) - f2) / scale) < 1e-10
    assert np.max(np.abs(np.einsum("...ijk,...k", dg, y))) < 1e-9


@pytest.mark.parametrize("name", ALL)
def test_metric_value_invariants(name, rng):
    m = get_model(name)
    s = m.sample_sites(rng, 30)
    mv = metric_tensor(m, s)
    assert np.allclose(mv.g, np.swapaxes(mv.g, -1, -2), atol=1e-12)
    eye = np.broadcast_to(np.eye(m.n), mv.g.shape)
    assert np.max(np.abs(mv.g @ mv.g_inv - eye)) < 1e-10
    assert np.all(mv.min_eigenvalue > 0)
    for lam in (0.5, 3.0):
        g2 = metric_array(m, s.x, lam * s.y)
        assert np.max(np.abs(g2 - mv.g) / np.maximum(1.0, np.abs(mv.g))) < 1e-10


@pytest.mark.parametrize("name", [n for n in ALL if get_model(n).is_riemannian])
def test_riemannian_metric_is_y_independent(name, rng):
    m = get_model(name)
    s = m.sample_sites(rng, 20)
    g1 = metric_array(m, s.x, s.y)
    g2 = metric_array(m, s.x, rng.normal(size=s.y.shape))
    assert np.max(np.abs(g1 - g2)) < 1e-12
    assert np.max(np.abs(g1 - m.metric_matrix(s.x))) < 1e-12


def test_euclidean_metric_is_identity():
    mv = metric_tensor(get_model("euclidean-2"), site([1.0, -2.0], [0.3, 7.0]))
    assert np.array_equal(mv.g, np.eye(2))


def test_quartic_metric_euler_against_fd():
    m = get_model("quartic")
    s = site([0, 0], [1, 1])
    g = np.array([[0.5 * float(jets.fd_partial(m.F2, s, (0, 0), tuple(np.eye(2, dtype=int)[i]
                                                                        + np.eye(2, dtype=int)[j])))
                   for j in range(2)] for i in range(2)])
    assert s.y @ g @ s.y == pytest.approx(np.sqrt(2.0), abs=1e-7)
    assert np.allclose(metric_tensor(m, s).g, g, atol=1e-6)


def test_quartic_degenerates_on_axes():
    m = get_model("quartic")
    with pytest.raises(DomainError):
        metric_tensor(m, site([0, 0], [1, 0]))
    assert not models.admissible_mask(m, np.zeros((1, 2)), np.array([[0.0, 2.0]]))[0]


def test_strong_convexity(rng):
    e = get_model("euclidean-3")
    assert check_strong_convexity(e, e.sample_sites(rng, 10)) == pytest.approx(1.0)
    fr = get_model("flat-randers")
    assert check_strong_convexity(fr, fr.sample_sites(rng, 100)) > 0
    bad = flat_randers(b=(1.2, 0.0), check=False)
    assert check_strong_convexity(bad, bad.sample_sites(rng, 100, admissible=False)) <= 0


def test_randers_condition_enforced():
    with pytest.raises(ValueError):
        flat_randers(b=(1.2, 0.0))
    with pytest.raises(ValueError):
        flat_randers(a=np.diag([4.0, 1.0]), b=(0.0, 1.0))
    flat_randers(a=np.diag([4.0, 1.0]), b=(1.9, 0.0))


def test_flat_randers_is_not_reversible(rng):
    fr = get_model("flat-randers")
    s = fr.sample_sites(rng, 50)
    assert np.max(np.abs(fr.F(s.x, s.y) - fr.F(s.x, -s.y))) > 0.1


def test_curved_randers_condition_on_chart(rng):
    m = get_model("curved-randers")
    x = m.chart.sample(rng, 500)
    a = 1.0 + 0.5 * np.sum(x * x, axis=1)
    b = 0.3 * np.stack([x[:, 1], x[:, 0] ** 2], axis=1)
    assert np.max(np.sum(b * b, axis=1) / a) < 0.09


def test_aliases_and_unknown():
    for alias, target in ALIASES.items():
        assert get_model(alias).name == target
    with pytest.raises(KeyError):
        get_model("klein-bottle")


def test_sphere_embeddings_are_isometric(rng):
    for name in ("s2-stereographic", "s2-polar"):
        m = get_model(name)
        s = m.sample_sites(rng, 20)
        p = m.embedding(s.x)
        assert np.allclose(np.linalg.norm(p, axis=1), 1.0)
        h = 1e-6
        dp = (m.embedding(s.x + h * s.y) - m.embedding(s.x - h * s.y)) / (2 * h)
        assert np.allclose(np.linalg.norm(dp, axis=1), m.F(s.x, s.y), rtol=1e-8)


def test_sample_sites_unit_and_in_region(rng):
    m = get_model("hyperbolic-disk")
    s = m.sample_sites(rng, 40, unit=True)
    assert np.allclose(m.F(s.x, s.y), 1.0)
    assert np.all(m.sample_region.contains(s.x))


def test_charts():
    box = Box((0.0, -1.0), (2.0, 1.0))
    assert list(box.contains(np.array([[1.0, 0.0], [3.0, 0.0]]))) == [True, False]
    assert box.shrink(0.5).upper[0] == pytest.approx(1.5)
    disk = Disk((1.0, 1.0), 2.0)
    assert list(disk.contains(np.array([[2.0, 2.0], [3.5, 1.0]]))) == [True, False]
    assert models.chart_from_json(disk.to_json()).radius == 2.0
    assert models.chart_from_json(box.to_json()).n == 2


@given(st.floats(0.05, 20.0), st.floats(-3, 3), st.floats(-3, 3))
def test_flat_randers_homogeneity_property(lam, y0, y1):
    fr = flat_randers(b=(0.3, -0.4))
    y = np.array([y0, y1])
    if np.linalg.norm(y) < 1e-6:
        return
    assert fr.F(np.zeros(2), lam * y) == pytest.approx(lam * fr.F(np.zeros(2), y), rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("name", ALL)
def test_descriptor_round_trip(name, rng):
    m = get_model(name)
    m2 = model_from_descriptor(json.loads(json.dumps(m.descriptor)))
    s = m.sample_sites(rng, 10)
    assert np.allclose(m2.F(s.x, s.y), m.F(s.x, s.y), rtol=1e-14)


def test_descriptor_with_chart_and_file(tmp_path):
    desc = {"family": "randers-flat", "dim": 2, "params": {"b": [0.1, 0.2]},
            "chart": {"type": "box", "lower": [-1, -1], "upper": [1, 1]}}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(desc))
    m = load_model(path)
    assert tuple(m.chart.upper) == (1.0, 1.0)
    assert m.F(np.zeros(2), np.array([1.0, 0.0])) == pytest.approx(1.1)


@pytest.mark.parametrize("desc", [
    {"family": "torus-knot", "dim": 2},
    {"family": "euclidean"},
    {"family": "randers-flat", "dim": 2},
    {"family": "euclidean", "dim": 2, "extra": 1},
    {"family": "euclidean", "dim": 2, "chart": {"type": "disk", "center": [0, 0], "radius": -1}},
    {"family": "euclidean", "dim": 3, "chart": {"type": "box", "lower": [0, 0], "upper": [1, 1]}},
    {"family": "sphere", "dim": 3},
])
def test_descriptor_schema_errors(desc):
    with pytest.raises(jsonschema.ValidationError):
        model_from_descriptor(desc)
