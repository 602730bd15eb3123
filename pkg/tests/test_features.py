import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bhsrs.features import (PipelineError, area_closing, area_opening, attribute_profile, emap_build,
                            minmax_normalize, pca_fit)
from bhsrs.linalg import jacobi_eigh

from oracles import area_opening_levels

small_images = arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 6))


# ---------------------------------------------------------------- PCA


def test_jacobi_matches_lapack(rng):
    a = rng.normal(size=(12, 12))
    a = a + a.T
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(a))[::-1], atol=1e-12)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-11)
    np.testing.assert_allclose(v.T @ v, np.eye(12), atol=1e-12)
    with pytest.raises(ValueError):
        jacobi_eigh(rng.normal(size=(3, 3)) + np.triu(np.ones((3, 3))))


def test_pca_line_and_isotropic(rng):
    t = rng.normal(size=200)
    line = np.outer(t, [1.0, 2.0, -0.5]) + 3.0
    model = pca_fit(line, 0.99)
    assert model.n_components == 1
    assert model.explained_ratio[0] == pytest.approx(1.0, abs=1e-9)
    iso = rng.normal(size=(5000, 3))
    assert pca_fit(iso, 0.99).n_components == 3


def test_pca_reconstruction_and_oracle(rng):
    x = rng.normal(size=(100, 10)) @ rng.normal(size=(10, 10))
    model = pca_fit(x, n_components=10)
    np.testing.assert_allclose(model.reconstruct(model.project(x)), x, atol=1e-8)
    np.testing.assert_allclose(model.components.T @ model.components, np.eye(10), atol=1e-8)
    assert np.all(np.diff(model.explained_ratio) <= 0) and model.explained_ratio.sum() <= 1 + 1e-9
    cov = np.cov(x, rowvar=False)
    _, vecs = jacobi_eigh(cov)
    proj_ref = (x - x.mean(0)) @ vecs
    proj = model.project(x)
    for j in range(10):
        sign = np.sign(proj_ref[:, j] @ proj[:, j])
        np.testing.assert_allclose(proj[:, j], sign * proj_ref[:, j], atol=1e-8)
    jac = pca_fit(x, n_components=10, solver="jacobi")
    np.testing.assert_allclose(jac.components, model.components, atol=1e-8)


def test_pca_sign_convention(rng):
    model = pca_fit(rng.normal(size=(50, 6)), n_components=6)
    idx = np.argmax(np.abs(model.components), axis=0)
    assert np.all(model.components[idx, np.arange(6)] > 0)


def test_pca_degenerate_and_errors():
    with pytest.warns(RuntimeWarning):
        model = pca_fit(np.ones((10, 4)))
    assert model.n_components == 0
    with pytest.raises(ValueError):
        pca_fit(np.ones((1, 4)))
    with pytest.raises(ValueError):
        pca_fit(np.random.default_rng(0).normal(size=(5, 2)), variance_target=0.0)


# ---------------------------------------------------------------- area filters


def test_area_opening_examples():
    const = np.full((6, 6), 2.5)
    assert np.array_equal(area_opening(const, 5), const)
    img = np.zeros((7, 7))
    img[2:5, 2:5] = 1.0
    assert np.all(area_opening(img, 10) == 0)
    assert np.array_equal(area_opening(img, 9), img)
    with pytest.raises(ValueError):
        area_opening(img, 0)


def test_area_closing_fills_hole():
    img = np.ones((6, 6))
    img[2:4, 2:4] = 0.0
    assert np.all(area_closing(img, 5) == 1.0)
    const = np.full((4, 4), -1.0)
    assert np.array_equal(area_closing(const, 3), const)


@pytest.mark.parametrize("lam", [2, 5, 20])
def test_area_opening_matches_level_oracle(lam):
    rng = np.random.default_rng(lam)
    for _ in range(20):
        img = rng.integers(0, 8, size=(16, 16)).astype(float)
        assert np.array_equal(area_opening(img, lam), area_opening_levels(img, lam))
        assert np.array_equal(area_closing(img, lam), -area_opening_levels(-img, lam))


def test_area_opening_float_levels(rng):
    img = rng.normal(size=(12, 12))
    assert np.array_equal(area_opening(img, 4), area_opening_levels(img, 4))


@settings(max_examples=60, deadline=None)
@given(small_images, st.integers(1, 12))
def test_opening_axioms(img, lam):
    img = img.astype(float)
    out = area_opening(img, lam)
    assert np.all(out <= img)
    assert np.array_equal(area_opening(out, lam), out)
    bigger = img + (img > 2)
    assert np.all(area_opening(bigger, lam) >= out)
    assert np.array_equal(area_closing(img, lam), -area_opening(-img, lam))


@settings(max_examples=30, deadline=None)
@given(small_images)
def test_profile_ordering(img):
    img = img.astype(float)
    lambdas = (2, 4, 9)
    prof = attribute_profile(img, lambdas)
    assert prof.shape == (7,) + img.shape
    assert np.array_equal(prof[3], img)
    closings, openings = prof[:3][::-1], prof[4:]
    for a, b in zip(openings[:-1], openings[1:]):
        assert np.all(b <= a)
    for a, b in zip(closings[:-1], closings[1:]):
        assert np.all(b >= a)


def test_area_opening_scales():
    img = np.random.default_rng(0).normal(size=(200, 200))
    out = area_opening(img, 100)
    assert out.shape == img.shape and np.all(out <= img)


# ---------------------------------------------------------------- min-max & EMAP


def test_minmax_examples():
    np.testing.assert_allclose(minmax_normalize(np.array([[2.0], [4.0], [6.0]]))[:, 0], [0, 0.5, 1])
    with pytest.warns(RuntimeWarning):
        out = minmax_normalize(np.full((3, 2), 7.0))
    assert np.all(out == 0)
    x = np.random.default_rng(0).normal(size=(10, 3))
    once = minmax_normalize(x)
    np.testing.assert_allclose(minmax_normalize(once), once, atol=1e-15)


def test_minmax_uses_labeled_pixels():
    x = np.array([[[0.0], [10.0]], [[5.0], [100.0]]])
    mask = np.array([[True, True], [True, False]])
    out = minmax_normalize(x, mask)
    assert out[1, 1, 0] == pytest.approx(10.0)
    assert out[0, 1, 0] == 1.0


def _cube(rng, h=20, w=20, c=5):
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.stack([np.sin(yy / 3.0 + k) + np.cos(xx / (2.0 + k)) for k in range(c)], axis=-1)
    return base + 0.1 * rng.normal(size=(h, w, c))


def test_emap_composition(rng):
    cube = _cube(rng)
    lambdas = (3, 10, 30)
    res = emap_build(cube, lambdas, 0.99)
    first = pca_fit(cube.reshape(-1, 5), 0.99)
    base = first.project(cube.reshape(-1, 5)).reshape(20, 20, -1)
    profiles = np.concatenate([attribute_profile(base[:, :, i], lambdas) for i in range(base.shape[2])]).transpose(1, 2, 0)
    assert profiles.shape[2] == 7 * first.n_components
    second = pca_fit(profiles.reshape(400, -1), 0.99)
    expected = minmax_normalize(second.project(profiles.reshape(400, -1)).reshape(20, 20, -1))
    assert np.array_equal(res.features, expected)
    assert np.all(res.features.min(axis=(0, 1)) == 0) and np.all(res.features.max(axis=(0, 1)) == 1)
    assert np.array_equal(emap_build(cube, lambdas).features, res.features)


def test_emap_constant_base_image_gives_constant_profile(rng):
    cube = _cube(rng, c=3)
    cube[:, :, 2] = 0.0
    cube[:, :, 1] = 0.0
    res = emap_build(cube, (3, 10), 0.99)
    assert res.first_pca.n_components == 1
    flat = np.full((20, 20), 4.0)
    prof = attribute_profile(flat, (3, 10, 30, 100))
    assert np.all(prof == 4.0)


def test_emap_degenerate_cube():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(PipelineError):
            emap_build(np.ones((8, 8, 3)), (2,))
