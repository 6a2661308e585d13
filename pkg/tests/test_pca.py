import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diresa.errors import DegenerateError, DimensionError
from diresa.pca import fit_pca, jacobi_eigh, pca_inverse, pca_transform, population_covariance


def _random_sym(rng, n):
    a = rng.normal(size=(n, n))
    return a + a.T


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
@settings(max_examples=60)
def test_jacobi_matches_lapack(seed, n):
    a = _random_sym(np.random.default_rng(seed), n)
    vals, vecs = jacobi_eigh(a)
    np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(a), rtol=0, atol=1e-11 * max(1, np.abs(a).max()))
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(a @ vecs, vecs * vals, atol=1e-10 * np.linalg.norm(a))


def test_jacobi_rejects_bad_input():
    with pytest.raises(DimensionError):
        jacobi_eigh(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))
    vals, vecs = jacobi_eigh(np.zeros((3, 3)))
    assert not vals.any() and np.array_equal(vecs, np.eye(3))


def test_line_y_equals_x():
    t = np.linspace(-1, 1, 50)
    m = fit_pca(np.column_stack([t, t]), 2)
    np.testing.assert_allclose(np.abs(m.components[0]), [2 ** -0.5, 2 ** -0.5], atol=1e-12)
    assert abs(m.eigenvalues[1]) < 1e-14


def test_isotropic_gaussian_eigenvalues():
    x = np.random.default_rng(0).normal(size=(100_000, 3))
    m = fit_pca(x, 3)
    np.testing.assert_allclose(m.eigenvalues, 1.0, rtol=0.05)
    assert (np.diff(m.eigenvalues) <= 0).all()


def test_transform_inverse_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 4)) @ rng.normal(size=(4, 4))
    m = fit_pca(x, 4)
    assert np.abs(pca_transform(m, m.mean[None, :])).max() == 0.0
    np.testing.assert_allclose(pca_inverse(m, pca_transform(m, x)), x, rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        pca_transform(m, np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        pca_inverse(fit_pca(x, 2), np.zeros((2, 3)))


@given(st.integers(0, 2 ** 31), st.integers(2, 6), st.data())
@settings(max_examples=60)
def test_reconstruction_identity_on_fit_split(seed, d, data):
    k = data.draw(st.integers(1, d))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(60, d)) * rng.uniform(0.1, 3, d)
    m = fit_pca(x, k)
    mse = np.mean((pca_inverse(m, pca_transform(m, x)) - x) ** 2)
    assert abs(mse * d - m.all_eigenvalues[k:].sum()) < 1e-9
    # orthonormal rows, projection idempotence, eigen residual
    np.testing.assert_allclose(m.components @ m.components.T, np.eye(k), atol=1e-12)
    once = pca_inverse(m, pca_transform(m, x))
    np.testing.assert_allclose(pca_inverse(m, pca_transform(m, once)), once, rtol=0, atol=1e-10)
    c = population_covariance(x)
    for lam, v in zip(m.eigenvalues, m.components):
        assert np.linalg.norm(c @ v - lam * v) < 1e-10 * np.linalg.norm(c)


def test_sign_convention_and_determinism():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 3)) @ rng.normal(size=(3, 3))
    a, b = fit_pca(x, 2), fit_pca(x.copy(), 2)
    assert a.components.tobytes() == b.components.tobytes()
    for row in a.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_degenerate_inputs():
    with pytest.raises(DegenerateError):
        fit_pca(np.ones((10, 3)), 2)
    with pytest.raises(DegenerateError):
        fit_pca(np.random.default_rng(0).normal(size=(3, 3)), 2)
    with pytest.raises(DimensionError):
        fit_pca(np.random.default_rng(0).normal(size=(10, 3)), 4)
