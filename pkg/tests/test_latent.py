import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diresa import latent as la
from diresa.errors import DegenerateError
from diresa.metrics import kpi_global
from diresa.pca import fit_pca, pca_inverse, pca_transform


def identity(x):
    return np.array(x, dtype=np.float64)


def _pca_codec(m):
    return (lambda x: pca_transform(m, x)), (lambda z: pca_inverse(m, z))


def test_identity_model_orders_by_variance():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.normal(scale=1.0, size=5000), rng.normal(scale=2.0, size=5000)])
    o = la.order_components(identity, identity, x)
    assert o.permutation.tolist() == [1, 0]
    np.testing.assert_allclose(o.decoded_variance, x.var(axis=0), rtol=1e-12)
    assert o.unexplained_variance_fraction == 0.0


@given(st.integers(0, 2 ** 31), st.integers(2, 5))
@settings(max_examples=30)
def test_pca_ordering_and_fractions(seed, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(200, d)) @ rng.normal(size=(d, d))
    m = fit_pca(x, d)
    enc, dec = _pca_codec(m)
    o = la.order_components(enc, dec, x)
    assert o.permutation.tolist() == list(range(d))
    np.testing.assert_allclose(o.decoded_variance, m.eigenvalues, rtol=1e-9, atol=1e-12)
    assert abs(o.explained_variance_fraction.sum() + o.unexplained_variance_fraction - 1) < 1e-9
    assert sorted(o.permutation.tolist()) == list(range(d))


def test_ties_keep_index_order():
    x = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    assert la.order_components(identity, identity, x).permutation.tolist() == [0, 1]


def test_reduced_pca_unexplained_fraction():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 3)) * [3.0, 1.0, 0.2]
    m = fit_pca(x, 2)
    frac, unexplained = la.explained_variance(*_pca_codec(m), x)
    mse = np.mean((pca_inverse(m, pca_transform(m, x)) - x) ** 2)
    assert unexplained == pytest.approx(mse / np.mean(x.var(axis=0)), rel=1e-12)
    assert abs(frac.sum() + unexplained - 1) < 1e-9


def test_linear_decoder_delta():
    rng = np.random.default_rng(2)
    D = rng.normal(size=(2, 4))
    z = rng.normal(size=(50, 2))
    data = z @ D
    enc = lambda x: np.linalg.lstsq(D.T, x.T, rcond=None)[0].T  # noqa: E731
    dec = lambda zz: zz @ D  # noqa: E731
    for j in range(2):
        sigma = enc(data)[:, j].std()
        delta = la.decoded_component_delta(enc, dec, data, j)
        np.testing.assert_allclose(delta, 2 * sigma * D[j], rtol=1e-9, atol=1e-12)
        assert np.array_equal(la.decoded_component_delta(enc, dec, data, j, sign=-1), -delta)


def test_pca_delta_along_eigenvector():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 3)) @ rng.normal(size=(3, 3))
    m = fit_pca(x, 2)
    for j in range(2):
        delta = la.decoded_component_delta(*_pca_codec(m), x, j)
        sigma = pca_transform(m, x)[:, j].std()
        np.testing.assert_allclose(delta, 2 * sigma * m.components[j], atol=1e-12)
        assert np.linalg.norm(delta) == pytest.approx(2 * np.sqrt(m.eigenvalues[j]), rel=1e-9)


def test_constant_component_warns_and_returns_zero():
    x = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
    with pytest.warns(la.DegenerateComponentWarning):
        out = la.decoded_component_delta(identity, identity, x, 1)
    assert np.array_equal(out, np.zeros(2))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        la.decoded_component_delta(identity, identity, x, 0)
    with pytest.raises(IndexError):
        la.decoded_component_delta(identity, identity, x, 2)


def test_errors():
    with pytest.raises(DegenerateError):
        la.order_components(lambda x: x * np.nan, identity, np.ones((3, 2)))
    with pytest.raises(DegenerateError):
        la.explained_variance(identity, identity, np.ones((3, 2)))


def test_scatter_round_trip(tmp_path):
    p = tmp_path / "s.csv"
    la.export_scatter([], [], p)
    assert p.read_text() == "d_original,d_latent\n"
    assert la.read_scatter(p)[0].size == 0
    la.export_scatter([3.0, 1.0, 2.0], [0.3, 0.1, 0.2], p)
    assert p.read_text().splitlines()[1:] == ["3.0,0.3", "1.0,0.1", "2.0,0.2"]
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=200), rng.uniform(size=200)
    la.export_scatter(a, b, p)
    ra, rb = la.read_scatter(p)
    assert np.array_equal(ra, a) and np.array_equal(rb, b)
    assert abs(kpi_global(ra, rb)[0] - kpi_global(a, b)[0]) < 1e-12


def test_component_report(tmp_path):
    o = la.ComponentOrdering(np.array([1, 0]), np.array([0.5, 2.0]), np.array([0.2, 0.75]), 0.05)
    p = tmp_path / "c.csv"
    la.export_component_report(o, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "rank,latent_index,decoded_variance,explained_fraction"
    assert lines[1] == "0,1,2.0,0.75" and lines[2] == "1,0,0.5,0.2" and lines[3] == "unexplained,,,0.05"
