import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import rel_error
from spade.errors import ConfigError, DegenerateInputError, GeometryError
from spade.registration import (AffineTransform, RegistrationConfig, compose, invert, load_transform, ncc,
                                ncc_objective, register, save_transform, warp)
from spade.volumes import PhantomSpec, Volume, generate_phantom

CENTER = np.array([31.5, 31.5, 31.5])


@pytest.fixture(scope="module")
def template():
    return generate_phantom(PhantomSpec(seed=11, size=(64, 64, 64), num_blobs=6), id="tmpl")


def _moving_for(template, truth):
    # moving[p] = template(truth(p)), so truth is the moving -> template map
    return warp(template, invert(truth))


def random_affine(rng, max_shift=3.0, jitter=0.05):
    a = np.eye(3) + rng.uniform(-jitter, jitter, (3, 3))
    return AffineTransform(a, rng.uniform(-max_shift, max_shift, 3))


def test_warp_identity():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(5, 6, 7)))
    assert np.array_equal(warp(v, AffineTransform.identity()).data, v.data)


def test_warp_constant_translation():
    v = Volume(np.full((5, 5, 5), 2.5))
    assert np.all(warp(v, AffineTransform.from_translation((1, -2, 3))).data == 2.5)


def test_warp_impulse_moves_by_translation():
    data = np.zeros((9, 9, 12))
    data[4, 4, 4] = 1.0
    out = warp(Volume(data), AffineTransform.from_translation((0, 0, 3))).data
    assert out[4, 4, 7] == 1.0
    assert out.sum() == 1.0


def test_warp_singular():
    with pytest.raises(GeometryError):
        warp(Volume(np.zeros((2, 2, 2))), AffineTransform(np.zeros((3, 3)), np.zeros(3)))


def test_ncc_examples():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5, 6))
    assert ncc(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ncc(a, -a) == pytest.approx(-1.0, abs=1e-12)
    assert ncc(a, 2 * a + 5) == pytest.approx(1.0, abs=1e-12)


def test_ncc_errors():
    with pytest.raises(DegenerateInputError):
        ncc(np.ones((3, 3, 3)), np.arange(27.0).reshape(3, 3, 3))
    with pytest.raises(ConfigError):
        ncc(np.ones((3, 3, 3)), np.ones((3, 3, 2)))


@given(st.integers(0, 10**6))
def test_ncc_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4, 5))
    assert abs(ncc(a, b) - ncc(b, a)) <= 1e-12
    assert -1.0 <= ncc(a, b) <= 1.0


def test_compose_examples():
    rng = np.random.default_rng(2)
    t = random_affine(rng)
    i = AffineTransform.identity()
    c = compose(i, t)
    assert np.allclose(c.matrix, t.matrix) and np.allclose(c.translation, t.translation)
    both = compose(AffineTransform.from_translation((2, 0, 0)), AffineTransform.from_translation((0, 3, 0)))
    assert np.allclose(both.translation, (2, 3, 0)) and np.allclose(both.matrix, np.eye(3))


def test_invert_examples():
    assert np.allclose(invert(AffineTransform.identity()).params(), AffineTransform.identity().params())
    assert np.allclose(invert(AffineTransform.from_translation((5, 5, 5))).translation, (-5, -5, -5))
    assert np.allclose(invert(AffineTransform(2 * np.eye(3), np.zeros(3))).matrix, 0.5 * np.eye(3))
    with pytest.raises(GeometryError):
        invert(AffineTransform(np.diag([1.0, 0.0, 1.0]), np.zeros(3)))


@given(st.integers(0, 10**6))
def test_compose_and_invert_laws(seed):
    rng = np.random.default_rng(seed)
    t1, t2 = random_affine(rng, 10, 0.4), random_affine(rng, 10, 0.4)
    pts = rng.normal(size=(6, 3)) * 10
    assert np.allclose(compose(t1, t2)(pts), t1(t2(pts)), atol=1e-9)
    assert np.allclose(invert(t1)(t1(pts)), pts, atol=1e-9)
    ident = invert(compose(t1, invert(t1)))
    assert np.max(np.abs(ident.params() - AffineTransform.identity().params())) <= 1e-9


def test_transform_file_round_trip(tmp_path):
    t = random_affine(np.random.default_rng(3))
    save_transform(tmp_path / "a.affine.json", t, "a", "tmpl", 0.98)
    back, doc = load_transform(tmp_path / "a.affine.json")
    assert np.array_equal(back.params(), t.params())
    assert doc["moving_id"] == "a" and doc["template_id"] == "tmpl" and doc["final_ncc"] == 0.98
    assert set(doc) == {"matrix", "translation", "moving_id", "template_id", "final_ncc"}


def test_warp_round_trip_preserves_phantom(template):
    rng = np.random.default_rng(4)
    for _ in range(3):
        t = random_affine(rng, 3.0, 0.05)
        back = warp(warp(template, t), invert(t))
        assert ncc(back, template) >= 0.99


def test_objective_gradient_matches_differences(template):
    # trilinear sampling has kinks at voxel faces; the phantom must be smooth at voxel scale
    low = template.data.astype(np.float64)
    rng = np.random.default_rng(5)
    for _ in range(2):
        t = random_affine(rng, 1.0, 0.03)
        moving = warp(Volume(low), random_affine(rng, 1.0, 0.03)).data
        _, d_a, d_t = ncc_objective(moving, low, t)
        analytic = np.concatenate([d_a.ravel(), d_t])
        h = 1e-4
        fd = np.zeros(12)
        for k in range(12):
            for sgn in (1, -1):
                p = t.params().copy()
                p[k] += sgn * h
                val, _, _ = ncc_objective(moving, low, AffineTransform(p[:9], p[9:]))
                fd[k] += sgn * val / (2 * h)
        assert rel_error(analytic, fd) <= 1e-3


def test_self_registration(template):
    res = register(template, template)
    assert np.max(np.abs(res.transform.params() - AffineTransform.identity().params())) <= 1e-2
    assert res.final_ncc >= 0.999


def test_recovers_translation(template):
    truth = AffineTransform.from_translation((0, 4, -6))
    res = register(_moving_for(template, truth), template)
    # compare the maps where it matters, on the volume interior
    pts = np.array([[z, y, x] for z in (16, 32, 48) for y in (16, 32, 48) for x in (16, 32, 48)], float)
    assert np.max(np.abs(res.transform(pts) - truth(pts))) <= 1.0
    assert np.max(np.abs(res.transform.translation - truth.translation)) <= 1.0


def test_recovers_scale(template):
    truth = AffineTransform.from_scale(1.1, CENTER)
    res = register(_moving_for(template, truth), template)
    assert np.max(np.abs(np.diag(res.transform.matrix) - 1.1)) <= 0.05


def test_register_is_monotone(template):
    rng = np.random.default_rng(6)
    for _ in range(3):
        truth = random_affine(rng, 5.0, 0.05)
        res = register(_moving_for(template, truth), template, RegistrationConfig(min_iterations=10))
        assert res.final_ncc >= res.initial_ncc
        assert res.iterations >= 10


def test_register_degenerate():
    flat = Volume(np.full((16, 16, 16), 100.0))
    with pytest.raises(DegenerateInputError):
        register(flat, flat)


def test_config_validation():
    with pytest.raises(ConfigError):
        RegistrationConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        RegistrationConfig(min_iterations=60, max_iterations=50)
